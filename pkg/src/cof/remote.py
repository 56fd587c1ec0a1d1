"""Remote agent protocol: HTTP/JSON clients for the assessor, planner,
verifier, and editor roles, plus a bundled mock endpoint that implements the
protocol on top of the deterministic agents.

Wire contract (all POST, JSON bodies, correlation ids echoed back):

    /assess -> {"label": "F1"|"F2"|"F3", "analysis": str}
    /plan   -> {"instruction": str}
    /verify -> {"Output": 0|1}
    /edit   -> {"image": base64 PNG}

Request bodies carry the role's template fields verbatim (filled), plus the
full rendered template under "template". Images travel as base64 PNG.
Perception is resolution-adaptive: frames in transitions touching F3 are
sent at the native resolution, other transitions at the small size.

Remote mode trades exactness for protocol realism: stages are judged from
detected scenes, so aesthetic levels are quantized to 1/64 and boundary
cases can differ from the in-memory oracle by one quantization step. Wire
renders use per-pixel noise (cell-exact perception); the block-correlated
noise of persisted dataset frames is a training-side concern only.
"""

from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

import numpy as np
import requests
from PIL import Image

from . import agents
from .agents import FORWARD, VerifyResult
from .errors import RemoteMalformed, RemoteTimeout
from .scenes import (
    Category,
    ConstraintKind,
    EditInstruction,
    PromptSpec,
    Raster,
    Scene,
    StageLabel,
    apply_edit,
    detect,
    parse_instruction_text,
    parse_prompt_text,
    rasterize,
    render_text,
)

SYSTEM_PREFIX = (
    "Generate a short refinement chain of the same concept and composition, "
    "improving the image step by step."
)

ASSESSOR_TEMPLATE = """You are a strict image quality assessor.

Input:
- PROMPT: {prompt}
- IMAGE: [Image Input]

Evaluate based on Semantic Alignment and Aesthetic Quality:
1. Semantically Misaligned (F1): Major semantic identity errors (e.g., wrong objects), regardless of aesthetics.
2. Visually Unrefined (F2): Semantically correct, but low aesthetic quality (blur, distortion, bad lighting).
3. High Fidelity (F3): Semantically correct AND high aesthetic quality.

Output Format (JSON-compatible):
{{
  "label": "F1" | "F2" | "F3",
  "analysis": "strict reasoning based on the definitions above",
}}"""

PLANNER_TEMPLATE = """You are a visual reasoning planner for image editing.

Input Context:
- CURRENT IMAGE: [current frame]
- PROMPT: {prompt}
- STAGE: {stage} (semantic correction OR aesthetic refinement)
- DIRECTION: {direction} (forward OR backward)
- CATEGORY: {category} (one of [Attribute Binding, etc.])
- Edit Hint: {hint} (based on CATEGORY)
- PREVIOUS FRAME: [prior frame, optional]
Editing Logic:
Generate a targeted editing instruction. If DIRECTION is forward, fix semantic discrepancies in the CATEGORY or enhance aesthetic realism. If DIRECTION is backward, explicitly introduce semantic errors related to the CATEGORY or degrade the visual quality.

Task:
Output exactly ONE minimal editing instruction (< 40 words) that achieves the goal derived above. If the PREVIOUS FRAME is provided, use it to maintain subject identity strictly.

Output Format (JSON-compatible):
{{
  "instruction": "edit instructions",
}}"""

VERIFIER_TEMPLATE = """You are a visual reasoning verifier for image editing chains.

Input Context:
- EDITED IMAGE: [new frame]
- PROMPT: {prompt}
- STAGE: {stage} (semantic correction OR aesthetic refinement)
- DIRECTION: {direction} (forward OR backward)
- CATEGORY: {category} (one of [Attribute Binding, etc.])
- PREVIOUS FRAME: [prior frame, optional]

Verification Logic:
Verify if the transition matches the DIRECTION: if forward, the image must improve in semantics or aesthetics; if backward, it must explicitly degrade or introduce errors. Additionally, check that the main subject identity remains consistent with the PREVIOUS FRAME and no unrelated artifacts appear.

Task:
- Output SUCCESS(1) if the image clearly executes the intended Forward or Backward goal while preserving unrelated content.
- Output FAIL(0) if the change is imperceptible, over-edited, or moves in the wrong direction.

Output Format (JSON-compatible):
{{
  "Output": 0 OR 1,
}}"""

CATEGORY_WIRE_NAMES = {
    Category.ATTRIBUTE_BINDING: "Attribute Binding",
    Category.OBJECT_COMBINATION: "Object Combination",
    Category.QUANTITY_CONTROL: "Quantity Control",
    Category.SPATIAL_ARRANGEMENT: "Spatial Arrangement",
    Category.CONTEXT_MANIPULATION: "Context Manipulation",
}
_WIRE_CATEGORIES = {v: k for k, v in CATEGORY_WIRE_NAMES.items()}

CATEGORY_HINTS = {
    Category.ATTRIBUTE_BINDING: "adjust one bound attribute such as a color",
    Category.OBJECT_COMBINATION: "add or drop one of the composed objects",
    Category.QUANTITY_CONTROL: "alter the number of counted objects",
    Category.SPATIAL_ARRANGEMENT: "reposition one object relative to another",
    Category.CONTEXT_MANIPULATION: "change the scene background or setting",
}


def _stage_axis(target: StageLabel, direction: str) -> str:
    semantic = (direction == FORWARD and target is StageLabel.F2) or (
        direction != FORWARD and target is StageLabel.F1
    )
    return "semantic correction" if semantic else "aesthetic refinement"


def _axis_to_target(stage: str, direction: str) -> StageLabel:
    semantic = stage.strip().lower().startswith("semantic")
    if direction == FORWARD:
        return StageLabel.F2 if semantic else StageLabel.F3
    return StageLabel.F1 if semantic else StageLabel.F2


@dataclass(frozen=True)
class RawInstruction:
    """Opaque remote instruction; only the text crosses the wire."""

    rendered_text: str

    def to_dict(self) -> dict:
        return {"op": "Remote", "rendered_text": self.rendered_text}


@dataclass(frozen=True)
class AgentEndpointConfig:
    base_url: str
    timeout_ms: int = 10000
    token_env: str = "COF_AGENT_TOKEN"
    resize_small: int = 512  # F1<->F2 transitions
    resize_native: int = 1024  # F2<->F3 transitions
    max_inflight: int = 4
    render_size: int = 128  # native raster size of the scene domain

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be positive")

    @staticmethod
    def from_env() -> "AgentEndpointConfig":
        import os

        url = os.environ.get("COF_AGENT_URL")
        if not url:
            raise RemoteMalformed("COF_AGENT_URL is not set")
        return AgentEndpointConfig(base_url=url)


def encode_image(raster: Raster, size: Optional[int] = None) -> str:
    img = Image.fromarray(raster.pixels, mode="RGB")
    if size and size != img.width:
        img = img.resize((size, size), Image.NEAREST)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str, native: int) -> Raster:
    try:
        img = Image.open(io.BytesIO(base64.b64decode(data))).convert("RGB")
    except Exception as e:
        raise RemoteMalformed(f"undecodable image payload: {e}") from e
    if img.width != native:
        if img.width % native or img.width != img.height:
            raise RemoteMalformed(f"image size {img.size} incompatible with {native}")
        img = img.resize((native, native), Image.NEAREST)
    return Raster(np.asarray(img, dtype=np.uint8))


class RemoteBackend:
    """Pipeline backend speaking the wire protocol; scenes are rendered to
    images on the way out and detected back into scenes on the way in."""

    RENDER_SEED = 0

    def __init__(self, endpoint: AgentEndpointConfig, tau_a: float = 0.8,
                 session: Optional[requests.Session] = None):
        self.endpoint = endpoint
        self.tau_a = tau_a
        self.session = session or requests.Session()
        self._counter = 0
        self._lock = threading.Lock()

    # -- plumbing ---------------------------------------------------------

    def _correlation_id(self) -> str:
        with self._lock:
            self._counter += 1
            return f"req-{self._counter:06d}"

    def _headers(self) -> dict:
        import os

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.endpoint.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        body = dict(body)
        body["correlation_id"] = self._correlation_id()
        try:
            resp = self.session.post(
                self.endpoint.base_url.rstrip("/") + path,
                data=json.dumps(body),
                headers=self._headers(),
                timeout=self.endpoint.timeout_ms / 1000.0,
            )
        except requests.Timeout as e:
            raise RemoteTimeout(f"{path} timed out") from e
        except requests.RequestException as e:
            raise RemoteMalformed(f"{path} transport failure: {e}") from e
        if resp.status_code != 200:
            raise RemoteMalformed(f"{path} returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as e:
            raise RemoteMalformed(f"{path} returned non-JSON body") from e

    def _render(self, frame, size: int) -> str:
        # per-pixel noise for wire renders: cell classification and the
        # aesthetic estimator stay exact through the remote round trip
        if not isinstance(frame, Raster):
            frame = rasterize(frame, self.RENDER_SEED, noise_block=1)
        return encode_image(frame, size)

    def _perception_size(self, target: StageLabel) -> int:
        if target is StageLabel.F3:
            return self.endpoint.resize_native
        return self.endpoint.resize_small

    # -- roles ------------------------------------------------------------

    def assess(self, frame, spec: PromptSpec):
        body = {
            "template": ASSESSOR_TEMPLATE.format(prompt=spec.rendered_text),
            "prompt": spec.rendered_text,
            "image": self._render(frame, self.endpoint.resize_native),
        }
        out = self._post("/assess", body)
        label = out.get("label")
        if label not in ("F1", "F2", "F3"):
            raise RemoteMalformed(f"assessor label {label!r} outside F1/F2/F3")
        if "analysis" not in out:
            raise RemoteMalformed("assessor response missing 'analysis'")
        return StageLabel(label), str(out["analysis"])

    def plan(self, current, spec, target, direction, category, prev=None, rng=None):
        del rng  # the remote planner owns its choices
        size = self._perception_size(target)
        stage = _stage_axis(target, direction)
        body = {
            "template": PLANNER_TEMPLATE.format(
                prompt=spec.rendered_text,
                stage=stage,
                direction=direction,
                category=CATEGORY_WIRE_NAMES[category],
                hint=CATEGORY_HINTS[category],
            ),
            "current_image": self._render(current, size),
            "prompt": spec.rendered_text,
            "stage": stage,
            "direction": direction,
            "category": CATEGORY_WIRE_NAMES[category],
            "hint": CATEGORY_HINTS[category],
            "previous_frame": self._render(prev, size) if prev is not None else None,
        }
        out = self._post("/plan", body)
        text = out.get("instruction")
        if not isinstance(text, str) or not text.strip():
            raise RemoteMalformed("planner response missing 'instruction'")
        try:
            return parse_instruction_text(text)
        except ValueError:
            return RawInstruction(rendered_text=text)

    def edit(self, current, instruction) -> Scene:
        body = {
            "image": self._render(current, self.endpoint.render_size),
            "instruction": instruction.rendered_text,
        }
        out = self._post("/edit", body)
        if "image" not in out:
            raise RemoteMalformed("editor response missing 'image'")
        raster = decode_image(out["image"], self.endpoint.render_size)
        return detect(raster)

    def verify(self, edited, spec, target, direction, prev, instruction=None):
        del instruction  # the verifier template carries no instruction slot
        size = self._perception_size(target)
        stage = _stage_axis(target, direction)
        body = {
            "template": VERIFIER_TEMPLATE.format(
                prompt=spec.rendered_text,
                stage=stage,
                direction=direction,
                category=CATEGORY_WIRE_NAMES[spec.category],
            ),
            "edited_image": self._render(edited, size),
            "prompt": spec.rendered_text,
            "stage": stage,
            "direction": direction,
            "category": CATEGORY_WIRE_NAMES[spec.category],
            "previous_frame": self._render(prev, size),
        }
        out = self._post("/verify", body)
        b = out.get("Output")
        if b not in (0, 1):
            raise RemoteMalformed(f"verifier output {b!r} not in {{0, 1}}")
        return VerifyResult(int(b), "remote verdict")


# --------------------------------------------------------------------------
# Bundled mock endpoint
# --------------------------------------------------------------------------


def _infer_category(constraints) -> Category:
    kinds = {c.kind for c in constraints}
    if ConstraintKind.COUNT in kinds:
        return Category.QUANTITY_CONTROL
    if ConstraintKind.RELATIVE_POSITION in kinds:
        return Category.SPATIAL_ARRANGEMENT
    if ConstraintKind.BACKGROUND in kinds:
        return Category.CONTEXT_MANIPULATION
    if ConstraintKind.COLOR in kinds:
        return Category.ATTRIBUTE_BINDING
    return Category.OBJECT_COMBINATION


def _spec_from_prompt(text: str) -> PromptSpec:
    constraints = parse_prompt_text(text)
    category = _infer_category(constraints)
    return PromptSpec(
        id="wire",
        category=category,
        constraints=constraints,
        rendered_text=render_text(category, constraints),
        seed=0,
    )


class _MockHandler(BaseHTTPRequestHandler):
    server_version = "CofMockAgent/0.1"

    def log_message(self, fmt, *args):  # silence request logging in tests
        del fmt, args

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        return json.loads(self.rfile.read(length).decode("utf-8"))

    def _reply(self, payload: dict, status: int = 200, raw: Optional[bytes] = None):
        data = raw if raw is not None else json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _image_scene(self, data: str) -> Scene:
        raster = decode_image(data, self.server.native_px)
        return detect(raster)

    def do_POST(self):  # noqa: N802 (http.server API)
        try:
            body = self._read_body()
            self.server.requests.append({"path": self.path, "body": body})
            mode = self.server.misbehave
            if mode == "malformed-json":
                self._reply({}, raw=b"this is not json")
                return
            if mode == "bad-label" and self.path == "/assess":
                self._reply({"label": "F4", "analysis": "?"})
                return
            if mode == "bad-output" and self.path == "/verify":
                self._reply({"Output": 2})
                return
            if mode == "missing-instruction" and self.path == "/plan":
                self._reply({"plan": "nope"})
                return

            if self.path == "/assess":
                spec = _spec_from_prompt(body["prompt"])
                scene = self._image_scene(body["image"])
                stage, analysis = agents.assess(scene, spec, self.server.tau_a)
                self._reply({"label": stage.value, "analysis": analysis})
            elif self.path == "/plan":
                spec = _spec_from_prompt(body["prompt"])
                scene = self._image_scene(body["current_image"])
                target = _axis_to_target(body["stage"], body["direction"])
                category = _WIRE_CATEGORIES[body["category"]]
                instr = agents.plan(
                    scene, spec, target, body["direction"], category,
                    rng=np.random.default_rng(0), tau_a=self.server.tau_a,
                )
                self._reply({"instruction": instr.rendered_text})
            elif self.path == "/verify":
                spec = _spec_from_prompt(body["prompt"])
                edited = self._image_scene(body["edited_image"])
                prev = self._image_scene(body["previous_frame"])
                target = _axis_to_target(body["stage"], body["direction"])
                res = agents.verify(
                    edited, spec, target, body["direction"], prev, None, self.server.tau_a
                )
                self._reply({"Output": res.b})
            elif self.path == "/edit":
                scene = self._image_scene(body["image"])
                instr = parse_instruction_text(body["instruction"])
                out = apply_edit(scene, instr)
                raster = rasterize(out, 0, noise_block=1)
                self._reply({"image": encode_image(raster)})
            else:
                self._reply({"error": f"unknown path {self.path}"}, status=404)
        except Exception as e:  # the mock reports failures as HTTP 500
            self._reply({"error": str(e)}, status=500)


class MockAgentServer:
    """In-process mock endpoint backed by the deterministic agents.

    Usage:
        with MockAgentServer() as url:
            backend = RemoteBackend(AgentEndpointConfig(base_url=url))
    """

    def __init__(self, tau_a: float = 0.8, native_px: int = 128):
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _MockHandler)
        self._httpd.tau_a = tau_a
        self._httpd.native_px = native_px
        self._httpd.misbehave = None
        self._httpd.requests = []
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    @property
    def requests(self) -> list:
        return self._httpd.requests

    def set_misbehave(self, mode: Optional[str]) -> None:
        self._httpd.misbehave = mode

    def __enter__(self) -> str:
        self._thread.start()
        return self.url

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()


def main():  # pragma: no cover - manual utility
    """Run the mock agent endpoint in the foreground."""
    import argparse

    ap = argparse.ArgumentParser(description="mock chain-curation agent endpoint")
    ap.add_argument("--port", type=int, default=8397)
    args = ap.parse_args()
    httpd = ThreadingHTTPServer(("127.0.0.1", args.port), _MockHandler)
    httpd.tau_a = 0.8
    httpd.native_px = 128
    httpd.misbehave = None
    httpd.requests = []
    print(f"mock agent endpoint on http://127.0.0.1:{args.port}")
    httpd.serve_forever()


if __name__ == "__main__":  # pragma: no cover
    main()
