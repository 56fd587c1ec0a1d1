"""Curation pipeline: prompt pool, tier sampling, quality routing, the
plan-edit-verify transition loop with regeneration fallback, the three
chain-construction strategies, chain validation, and dataset persistence.

Dataset layout:

    <out>/manifest.json
    <out>/records/<prompt-id>/record.json
    <out>/records/<prompt-id>/f{1,2,3}.png

Every record is a pure function of (config, prompt); per-record rng streams
are keyed by (master_seed, prompt seed), so runs are byte-reproducible and
independent of worker count or scheduling.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import agents
from .agents import BACKWARD, FORWARD, TierLabel, VerifyResult
from .errors import (
    ConfigError,
    EditInapplicable,
    NothingToPlan,
    PlacementExhausted,
    TransitionImpossible,
)
from .scenes import (
    DEFAULT_TAU_A,
    Category,
    EditInstruction,
    EditOp,
    PromptSpec,
    Scene,
    StageLabel,
    apply_edit,
    best_assignment,
    classify_stage,
    generate_prompt,
    rasterize,
    semantic_score,
)

_UINT64 = (1 << 64) - 1


class Strategy(Enum):
    FORWARD = "forward-refinement"
    BIDIRECTIONAL = "bidirectional-completion"
    BACKWARD = "backward-synthesis"


@dataclass(frozen=True)
class PipelineConfig:
    tier_probs: tuple[float, float, float] = (0.25, 0.5, 0.25)
    max_retries: int = 3  # K
    tau_a: float = DEFAULT_TAU_A
    pool_size: int = 2000
    category_mix: tuple[float, float, float, float, float] = (0.2,) * 5
    master_seed: int = 0
    backend: str = "deterministic"  # or "remote"
    workers: int = 1

    def __post_init__(self):
        if abs(sum(self.tier_probs) - 1.0) > 1e-9:
            raise ConfigError("tier_probs must sum to 1")
        if any(p < 0 for p in self.tier_probs):
            raise ConfigError("tier_probs must be non-negative")
        if self.max_retries < 1:
            raise ConfigError("K must be >= 1")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if abs(sum(self.category_mix) - 1.0) > 1e-9 or any(p < 0 for p in self.category_mix):
            raise ConfigError("category_mix must be a distribution")
        if self.backend not in ("deterministic", "remote"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tier_probs"] = list(self.tier_probs)
        d["category_mix"] = list(self.category_mix)
        return d


@dataclass
class TransitionLog:
    direction: str
    target: str
    attempts: list[dict] = field(default_factory=list)  # {instruction, b, reason}
    fallback_used: bool = False

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "target": self.target,
            "attempts": self.attempts,
            "fallback_used": self.fallback_used,
        }


@dataclass
class CurationRecord:
    prompt: PromptSpec
    tier: TierLabel
    anchor_stage: StageLabel
    strategy: Strategy
    scenes: list[Scene]  # (F1, F2, F3) when complete
    noise_seeds: list[int]
    transitions: list[TransitionLog]
    status: str  # "complete" | "dropped"
    drop_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt.to_dict(),
            "tier": self.tier.value,
            "anchor_stage": self.anchor_stage.value,
            "strategy": self.strategy.value,
            "frames": [s.to_dict() for s in self.scenes],
            "noise_seeds": self.noise_seeds,
            "transitions": [t.to_dict() for t in self.transitions],
            "status": self.status,
            "drop_reason": self.drop_reason,
            "scores": [
                {
                    "semantic": semantic_score(s, self.prompt)[0],
                    "aesthetic": s.aesthetic_level,
                }
                for s in self.scenes
            ],
        }


# --------------------------------------------------------------------------
# Pool, tiers, routing
# --------------------------------------------------------------------------

_CATS = list(Category)


def _normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def build_prompt_pool(cfg: PipelineConfig) -> list[PromptSpec]:
    """pool_size unique prompts drawn per category_mix, deduplicated on
    normalized rendered text; deterministic under master_seed. Prompt seeds
    are the draw counter, so a prefix of the pool is stable across sizes."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.master_seed & _UINT64, 0)))
    cum = np.cumsum(cfg.category_mix)
    pool: list[PromptSpec] = []
    seen: set[str] = set()
    attempts = 0
    limit = 200 * cfg.pool_size
    while len(pool) < cfg.pool_size:
        if attempts >= limit:
            raise ConfigError(
                f"could not assemble {cfg.pool_size} unique prompts "
                f"(space exhausted after {attempts} draws)"
            )
        cat = _CATS[int(np.searchsorted(cum, rng.random(), side="right"))]
        spec = generate_prompt(cat, attempts)
        attempts += 1
        key = _normalize_text(spec.rendered_text)
        if key in seen:
            continue
        seen.add(key)
        pool.append(spec)
    return pool


def sample_tier(rng: np.random.Generator, probs=(0.25, 0.5, 0.25)) -> TierLabel:
    """Inverse-CDF draw over (weak, medium, strong)."""
    u = rng.random()
    cum = np.cumsum(probs)
    return list(TierLabel)[int(np.searchsorted(cum, u, side="right"))]


def route(stage: StageLabel) -> Strategy:
    return {
        StageLabel.F1: Strategy.FORWARD,
        StageLabel.F2: Strategy.BIDIRECTIONAL,
        StageLabel.F3: Strategy.BACKWARD,
    }[stage]


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class DeterministicBackend:
    """Exact agents operating directly on Scene structures."""

    def __init__(self, tau_a: float = DEFAULT_TAU_A):
        self.tau_a = tau_a

    def assess(self, scene, spec):
        return agents.assess(scene, spec, self.tau_a)

    def plan(self, current, spec, target, direction, category, prev=None, rng=None):
        return agents.plan(current, spec, target, direction, category, prev, rng, self.tau_a)

    def edit(self, current, instruction):
        return agents.edit(current, instruction)

    def verify(self, edited, spec, target, direction, prev, instruction=None):
        return agents.verify(edited, spec, target, direction, prev, instruction, self.tau_a)


def make_backend(cfg: PipelineConfig):
    if cfg.backend == "deterministic":
        return DeterministicBackend(cfg.tau_a)
    from .remote import RemoteBackend, AgentEndpointConfig

    return RemoteBackend(AgentEndpointConfig.from_env(), tau_a=cfg.tau_a)


# --------------------------------------------------------------------------
# UEP transition loop
# --------------------------------------------------------------------------


def _improved(prev: Scene, edited: Scene, spec: PromptSpec, target: StageLabel) -> bool:
    sem_p, _ = semantic_score(prev, spec)
    sem_n, _ = semantic_score(edited, spec)
    if sem_n > sem_p:
        return True
    return sem_n == sem_p == 1.0 and target is StageLabel.F3 and \
        edited.aesthetic_level > prev.aesthetic_level


def _fallback_frame(spec: PromptSpec, target: StageLabel, rng: np.random.Generator,
                    tau_a: float) -> Scene:
    """Regenerate the target frame with the strong tier and stage-adjust."""
    seed = int(rng.integers(2**63))
    scene = agents.generate_anchor(spec, TierLabel.STRONG, seed)
    if target in (StageLabel.F2, StageLabel.F1):
        delta = scene.aesthetic_level - (tau_a - agents.BACKWARD_AESTHETIC_DROP)
        if delta > 0:
            scene = apply_edit(scene, EditInstruction(EditOp.DEGRADE, {"delta": delta}))
    if target is StageLabel.F1:
        _, _, binding = best_assignment(scene, spec)
        instr = agents._perturb_instruction(
            scene, spec, _primary_constraint(spec, rng), binding, rng
        )
        scene = apply_edit(scene, instr)
    return scene


def _primary_constraint(spec: PromptSpec, rng: np.random.Generator):
    from .scenes import PRIMARY_KIND

    primary = [c for c in spec.constraints if c.kind is PRIMARY_KIND[spec.category]]
    return primary[int(rng.integers(len(primary)))]


def _fallback_ok(scene: Scene, spec: PromptSpec, target: StageLabel, tau_a: float) -> bool:
    if classify_stage(scene, spec, tau_a) is not target:
        return False
    sem, _ = semantic_score(scene, spec)
    return sem < 1.0 if target is StageLabel.F1 else sem == 1.0


def uep_transition(
    frame: Scene,
    spec: PromptSpec,
    target: StageLabel,
    direction: str,
    category: Category,
    rng: np.random.Generator,
    backend=None,
    max_retries: int = 3,
    tau_a: float = DEFAULT_TAU_A,
) -> tuple[Scene, TransitionLog]:
    """Plan -> edit -> verify, stopping at b=1; up to max_retries rounds, then
    fall back to regenerating the target frame with the strong generator.

    A forward edit that improves lexicographically but does not yet reach the
    target stage is kept as the new working frame; other rejected edits are
    discarded. Raises TransitionImpossible when the fallback frame also fails
    its stage check.
    """
    backend = backend or DeterministicBackend(tau_a)
    log = TransitionLog(direction=direction, target=target.value)
    current = frame
    for _ in range(max_retries):
        try:
            instr = backend.plan(current, spec, target, direction, category,
                                 prev=current, rng=rng)
        except (NothingToPlan, EditInapplicable, PlacementExhausted) as e:
            log.attempts.append({"instruction": None, "b": 0, "reason": f"plan failed: {e}"})
            continue
        try:
            edited = backend.edit(current, instr)
        except EditInapplicable as e:
            log.attempts.append(
                {"instruction": instr.to_dict(), "b": 0, "reason": f"edit failed: {e}"}
            )
            continue
        res: VerifyResult = backend.verify(edited, spec, target, direction, current, instr)
        log.attempts.append(
            {"instruction": instr.to_dict(), "b": res.b, "reason": res.reason}
        )
        if res.b == 1:
            return edited, log
        if direction == FORWARD and _improved(current, edited, spec, target):
            current = edited
    log.fallback_used = True
    fb = _fallback_frame(spec, target, rng, tau_a)
    if not _fallback_ok(fb, spec, target, tau_a):
        raise TransitionImpossible(
            f"fallback frame failed the {target.value} stage check for {spec.id}"
        )
    return fb, log


# --------------------------------------------------------------------------
# Chain completion and validation
# --------------------------------------------------------------------------


def complete_chain(
    anchor: Scene,
    anchor_stage: StageLabel,
    spec: PromptSpec,
    rng: np.random.Generator,
    backend=None,
    max_retries: int = 3,
    tau_a: float = DEFAULT_TAU_A,
    tier: TierLabel = TierLabel.MEDIUM,
) -> CurationRecord:
    """Expand a routed anchor into an (F1, F2, F3) record via the strategy
    matching its stage; failures surface as status "dropped"."""
    strategy = route(anchor_stage)
    transitions: list[TransitionLog] = []
    cat = spec.category

    def t(frame, target, direction):
        out, tl = uep_transition(
            frame, spec, target, direction, cat, rng, backend, max_retries, tau_a
        )
        transitions.append(tl)
        return out

    try:
        if strategy is Strategy.FORWARD:
            f1 = anchor
            f2 = t(f1, StageLabel.F2, FORWARD)
            f3 = t(f2, StageLabel.F3, FORWARD)
        elif strategy is Strategy.BIDIRECTIONAL:
            f2 = anchor
            f1 = t(f2, StageLabel.F1, BACKWARD)
            f3 = t(f2, StageLabel.F3, FORWARD)
        else:
            f3 = anchor
            f2 = t(f3, StageLabel.F2, BACKWARD)
            f1 = t(f2, StageLabel.F1, BACKWARD)
        scenes3 = [f1, f2, f3]
        status, reason = "complete", ""
    except TransitionImpossible as e:
        scenes3 = []
        status, reason = "dropped", str(e)

    noise_seeds = [int(rng.integers(2**63)) for _ in range(3)]
    return CurationRecord(
        prompt=spec,
        tier=tier,
        anchor_stage=anchor_stage,
        strategy=strategy,
        scenes=scenes3,
        noise_seeds=noise_seeds,
        transitions=transitions,
        status=status,
        drop_reason=reason,
    )


def validate_chain(record: CurationRecord, tau_a: float = DEFAULT_TAU_A) -> bool:
    """Stage labels in order, strictly improving semantics to 1.0 by F2, and
    strictly improving aesthetics from F2 to F3."""
    if record.status != "complete" or len(record.scenes) != 3:
        return False
    f1, f2, f3 = record.scenes
    spec = record.prompt
    if classify_stage(f1, spec, tau_a) is not StageLabel.F1:
        return False
    if classify_stage(f2, spec, tau_a) is not StageLabel.F2:
        return False
    if classify_stage(f3, spec, tau_a) is not StageLabel.F3:
        return False
    s1, _ = semantic_score(f1, spec)
    s2, _ = semantic_score(f2, spec)
    s3, _ = semantic_score(f3, spec)
    return s1 < s2 == s3 == 1.0 and f2.aesthetic_level < f3.aesthetic_level


# --------------------------------------------------------------------------
# Curate
# --------------------------------------------------------------------------


def record_rng(master_seed: int, prompt_seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((master_seed & _UINT64, 2, prompt_seed & _UINT64))
    )


def build_record(cfg: PipelineConfig, spec: PromptSpec, backend=None) -> CurationRecord:
    rng = record_rng(cfg.master_seed, spec.seed)
    tier = sample_tier(rng, cfg.tier_probs)
    backend = backend or make_backend(cfg)
    for _ in range(4):  # placement exhaustion is re-seeded upstream
        try:
            anchor = agents.generate_anchor(spec, tier, int(rng.integers(2**63)))
            break
        except PlacementExhausted:
            continue
    else:
        return CurationRecord(
            prompt=spec, tier=tier, anchor_stage=StageLabel.F1,
            strategy=Strategy.FORWARD, scenes=[], noise_seeds=[],
            transitions=[], status="dropped", drop_reason="placement exhausted",
        )
    anchor_stage, _ = backend.assess(anchor, spec)
    record = complete_chain(
        anchor, anchor_stage, spec, rng, backend, cfg.max_retries, cfg.tau_a, tier
    )
    if record.status == "complete" and not validate_chain(record, cfg.tau_a):
        record.status = "dropped"
        record.drop_reason = "chain failed validation"
    return record


def _record_worker(args):
    cfg_dict, spec_dict = args
    cfg = PipelineConfig(**{**cfg_dict, "workers": 1})
    spec = PromptSpec.from_dict(spec_dict)
    record = build_record(cfg, spec)
    return record


def persist_record(record: CurationRecord, records_dir: Path) -> None:
    rdir = records_dir / record.prompt.id
    rdir.mkdir(parents=True, exist_ok=True)
    with open(rdir / "record.json", "w", encoding="utf-8") as f:
        json.dump(record.to_dict(), f, sort_keys=True, separators=(",", ":"))
    for i, (scene, seed) in enumerate(zip(record.scenes, record.noise_seeds), start=1):
        rasterize(scene, seed).save_png(rdir / f"f{i}.png")


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def curate(cfg: PipelineConfig, out_dir) -> tuple[Path, dict]:
    """Pool -> tier sample -> anchor -> assess -> route -> complete ->
    validate -> persist complete records; returns (dataset path, manifest)."""
    out = Path(out_dir)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    pool = build_prompt_pool(cfg)

    if cfg.workers > 1:
        jobs = [(cfg.to_dict(), spec.to_dict()) for spec in pool]
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            records = list(ex.map(_record_worker, jobs, chunksize=16))
    else:
        backend = make_backend(cfg)
        records = [build_record(cfg, spec, backend) for spec in pool]

    complete = [r for r in records if r.status == "complete"]
    dropped = [r for r in records if r.status != "complete"]
    for record in complete:
        persist_record(record, records_dir)

    n_transitions = sum(len(r.transitions) for r in records) or 1
    n_fallback = sum(1 for r in records for t in r.transitions if t.fallback_used)

    def count_by(items, key):
        out: dict[str, int] = {}
        for it in items:
            k = key(it)
            out[k] = out.get(k, 0) + 1
        return dict(sorted(out.items()))

    manifest = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "master_seed": cfg.master_seed,
        "pool_size": cfg.pool_size,
        "completed": len(complete),
        "dropped": len(dropped),
        "drop_rate": len(dropped) / len(records),
        "fallback_rate": n_fallback / n_transitions,
        "yield_ratio": len(complete) / cfg.pool_size,
        "counts": {
            "category": count_by(complete, lambda r: r.prompt.category.slug),
            "tier": count_by(complete, lambda r: r.tier.value),
            "strategy": count_by(complete, lambda r: r.strategy.value),
        },
        "dropped_prompts": sorted(r.prompt.id for r in dropped),
        "records": sorted(r.prompt.id for r in complete),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))
    return out, manifest


# --------------------------------------------------------------------------
# Dataset loading (train/eval side)
# --------------------------------------------------------------------------


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_record(dataset_dir, record_id: str) -> dict:
    with open(Path(dataset_dir) / "records" / record_id / "record.json", encoding="utf-8") as f:
        return json.load(f)


def iter_record_frames(dataset_dir, record_id: str):
    """Yield the three persisted PNG frames as Raster objects."""
    from .scenes import Raster

    rdir = Path(dataset_dir) / "records" / record_id
    for i in (1, 2, 3):
        yield Raster.load_png(rdir / f"f{i}.png")


def load_training_arrays(dataset_dir, encoding: str = "framewise"):
    """Encode the dataset into training arrays.

    encoding: "framewise" (default, 3 independent per-frame latents),
    "continuous" (padded causal encoding, 2 temporal slots), or
    "final-frame" (target-only ablation view, 1 latent).
    Returns (chains (N, F, C, h, w) float32, ys (N, 64) float32, specs).
    """
    from .codec import FrameChain, encode_continuous, encode_framewise
    from .flow import embed_prompt

    manifest = load_manifest(dataset_dir)
    chains, ys, specs = [], [], []
    for rid in manifest["records"]:
        rec = load_record(dataset_dir, rid)
        spec = PromptSpec.from_dict(rec["prompt"])
        frames = list(iter_record_frames(dataset_dir, rid))
        chain = FrameChain(frames=frames, prompt_id=rid)
        if encoding == "framewise":
            z = encode_framewise(chain).stacked()
        elif encoding == "continuous":
            z = encode_continuous(chain).stacked()
        elif encoding == "final-frame":
            z = encode_framewise(FrameChain(frames=frames[2:], prompt_id=rid)).stacked()
        else:
            raise ConfigError(f"unknown encoding {encoding!r}")
        chains.append(z)
        ys.append(embed_prompt(spec).y)
        specs.append(spec)
    return (
        np.stack(chains).astype(np.float32),
        np.stack(ys).astype(np.float32),
        specs,
    )
