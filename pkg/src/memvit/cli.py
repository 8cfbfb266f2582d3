"""Command-line surface.

Subcommands: ``bench-flops`` (analytical cost sweeps), ``train-synth``
(synthetic recall-task training of a memory model and its memoryless
twin), ``stream-infer`` (streaming inference with bank snapshots and
resume), ``trace-rf`` (analytic vs empirical receptive field), and
``grad-check`` (finite-difference check of the whole engine).

All numeric output goes to files (or stdout with ``--out -``); human logs
go to stderr.  Exit codes: 0 success, 2 configuration error, 3 acceptance
check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys

import numpy as np

from . import analysis
from .config import ConfigError, ModelSpec, StageSpec, load_spec, mvit16_spec
from .memory import BankParseError, bank_deserialize, bank_serialize, boundary_reset
from .model import (
    AdamW,
    CheckpointError,
    Model,
    build_model,
    cosine_lr,
    forward_clip,
    fresh_banks,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .streaming import (
    RecallTaskSpec,
    corpus_from_json,
    gen_recall_task,
    stream_clips,
)

log = logging.getLogger("memvit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3


class CheckFailure(RuntimeError):
    """An acceptance-style runtime check failed (exit code 3)."""


def _write_out(path: str, text: str):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _load_spec_arg(path: str | None) -> ModelSpec:
    if path is None:
        return mvit16_spec()
    try:
        return load_spec(path)
    except OSError as e:
        raise ConfigError(f"cannot read spec {path}: {e}") from e


def _parse_sweep(text: str | None):
    """'M=0,1,2,3,4' or 'T=16,32' -> (axis, values); 'M=' -> empty sweep."""
    if text is None:
        return "M", [0, 1, 2, 3, 4]
    if "=" not in text:
        raise ConfigError(f"sweep must look like M=0,1,2 or T=16,32; got {text!r}")
    axis, _, vals = text.partition("=")
    axis = axis.strip().upper()
    if axis not in ("M", "T"):
        raise ConfigError(f"sweep axis must be M or T, got {axis!r}")
    values = [int(v) for v in vals.split(",") if v.strip()]
    return axis, values


# -- bench-flops -------------------------------------------------------------


def cmd_bench_flops(args) -> int:
    spec = _load_spec_arg(args.spec)
    axis, values = _parse_sweep(args.sweep)
    modes = args.modes.split(",") if args.modes else list(analysis.MODES)
    for mode in modes:
        if mode not in analysis.MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {analysis.MODES}")
    if not values:
        rows = []
    elif axis == "M":
        rows = analysis.cost_rows(spec, modes, m_sweep=values)
    else:
        rows = analysis.cost_rows(spec, modes, t_sweep=values, m_sweep=[spec.memory_len])
    _write_out(args.out, analysis.rows_to_csv(rows))
    log.info("wrote %d rows to %s", len(rows), args.out)
    return EXIT_OK


# -- train-synth -------------------------------------------------------------


def recall_toy_spec(memory_len: int = 2, num_classes: int = 4) -> ModelSpec:
    """Small single-stage model used by the synthetic recall experiments."""
    return ModelSpec(
        input_t=2,
        input_hw=8,
        cube_kernel=(2, 4, 4),
        cube_stride=(2, 4, 4),
        cube_channels=16,
        stages=(StageSpec(depth=1, channels=16, heads=1),),
        kv_stride_initial=(1, 1, 1),
        memory_len=memory_len,
        compression_factor=(1, 1, 1),
        aug_policy="all",
        num_classes=num_classes,
    )


def _recall_batch(task, rng, n_videos, n_clips, clip_span, hw):
    seqs = []
    for _ in range(n_videos):
        rec = gen_recall_task(task, rng, 0, n_clips, clip_span)
        seqs.append([(e.clip, e.label) for e in stream_clips([rec], clip_span, hw)])
    return seqs


def eval_recall(model: Model, task: RecallTaskSpec, n_videos: int = 40,
                n_clips: int = 6, seed: int = 999) -> float:
    """Accuracy over cue-labeled clips of freshly generated videos."""
    spec = model.spec
    erng = np.random.default_rng(seed)
    correct = total = 0
    for _ in range(n_videos):
        rec = gen_recall_task(task, erng, 0, n_clips, spec.input_t)
        banks = fresh_banks(model)
        for e in stream_clips([rec], spec.input_t, spec.input_hw):
            out = forward_clip(
                model, e.clip, banks, clip_index=e.global_index, video_id=e.video_id
            )
            if e.label is not None:
                total += 1
                correct += int(np.argmax(out.logits.data) == e.label)
    return correct / total


def train_recall(
    task: RecallTaskSpec,
    memory_len: int,
    steps: int,
    seed: int = 0,
    base_lr: float = 5e-3,
    batch_videos: int = 6,
    video_clips: int = 6,
    eval_every: int = 0,
    checkpoint_path: str | None = None,
    log_rows: list | None = None,
    variant: str = "",
) -> Model:
    """Train a toy model on the recall task; aborts on divergence."""
    spec = recall_toy_spec(memory_len=memory_len, num_classes=task.num_classes)
    model = build_model(spec, seed=seed)
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=base_lr)
    last_good = None
    for step in range(steps):
        seqs = _recall_batch(task, rng, batch_videos, video_clips, spec.input_t, spec.input_hw)
        loss = train_step(
            model, seqs, opt, curriculum_len=video_clips, rng=rng,
            lr=cosine_lr(base_lr, step, steps), drop_augment=False,
        )
        if not np.isfinite(loss):
            if checkpoint_path and last_good is not None:
                _write_out(checkpoint_path + ".meta", json.dumps({"last_good_step": last_good}))
            raise CheckFailure(f"divergence: loss {loss} at step {step}")
        last_good = step
        if checkpoint_path and (step + 1) % max(1, steps // 4) == 0:
            save_checkpoint(model, checkpoint_path)
        if eval_every and (step % eval_every == 0 or step == steps - 1):
            acc = eval_recall(model, task)
            log.info("%s step %d loss %.4f acc %.3f", variant, step, loss, acc)
            if log_rows is not None:
                log_rows.append(f"{variant},{step},{loss:.6f},{acc:.4f}")
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model


def cmd_train_synth(args) -> int:
    task = RecallTaskSpec(num_classes=4, cue_offset=args.k, blank_symbol=None)
    rows = ["variant,step,loss,accuracy"]
    memory = train_recall(
        task, memory_len=args.memory_len, steps=args.steps, seed=args.seed,
        eval_every=max(1, args.steps // 8), log_rows=rows, variant="memory",
        checkpoint_path=args.checkpoint,
    )
    twin = train_recall(
        task, memory_len=0, steps=args.steps, seed=args.seed,
        eval_every=max(1, args.steps // 8), log_rows=rows, variant="memoryless",
    )
    acc_mem = eval_recall(memory, task)
    acc_twin = eval_recall(twin, task)
    rows.append(f"memory,final,,{acc_mem:.4f}")
    rows.append(f"memoryless,final,,{acc_twin:.4f}")
    _write_out(args.out, "\n".join(rows) + "\n")
    log.info("final accuracy: memory %.3f, memoryless twin %.3f", acc_mem, acc_twin)
    return EXIT_OK


# -- stream-infer ------------------------------------------------------------
#
# Stream snapshot: magic "MVST" | u32 version=1 | u64 next_global_index |
# u32 bank_count | per bank: u32 layer_id | u32 blob_len | bank snapshot.

_ST_MAGIC = b"MVST"


def save_stream_snapshot(path: str, next_global_index: int, banks: dict) -> None:
    with open(path, "wb") as f:
        f.write(_ST_MAGIC)
        f.write(struct.pack("<IQI", 1, next_global_index, len(banks)))
        for layer_id in sorted(banks):
            blob = bank_serialize(banks[layer_id])
            f.write(struct.pack("<II", layer_id, len(blob)))
            f.write(blob)


def load_stream_snapshot(path: str) -> tuple[int, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _ST_MAGIC:
        raise BankParseError("bad magic (not a stream snapshot)")
    version, next_idx, count = struct.unpack("<IQI", data[4:20])
    if version != 1:
        raise BankParseError(f"unsupported stream snapshot version {version}")
    off = 20
    banks = {}
    for _ in range(count):
        layer_id, blob_len = struct.unpack("<II", data[off : off + 8])
        off += 8
        banks[layer_id] = bank_deserialize(data[off : off + blob_len])
        off += blob_len
    return next_idx, banks


def run_stream(
    model: Model,
    corpus,
    banks: dict,
    skip_until: int = 0,
    snapshot_every: int = 0,
    snapshot_prefix: str | None = None,
) -> list[dict]:
    """Predictions for every clip with global index >= skip_until."""
    spec = model.spec
    rows = []
    for e in stream_clips(corpus, spec.input_t, spec.input_hw):
        if e.global_index < skip_until:
            continue
        if e.is_boundary:
            for bank in banks.values():
                boundary_reset(bank, e.video_id)
        out = forward_clip(
            model, e.clip, banks, clip_index=e.global_index, video_id=e.video_id
        )
        rows.append(
            {
                "global_index": e.global_index,
                "video_id": e.video_id,
                "clip_index": e.clip_index,
                "prediction": int(np.argmax(out.logits.data)),
                "label": "" if e.label is None else e.label,
            }
        )
        done = e.global_index + 1
        if snapshot_every and snapshot_prefix and done % snapshot_every == 0:
            save_stream_snapshot(f"{snapshot_prefix}.clip{done}.snap", done, banks)
    return rows


def _predictions_csv(rows: list[dict]) -> str:
    header = "global_index,video_id,clip_index,prediction,label"
    lines = [header] + [
        f"{r['global_index']},{r['video_id']},{r['clip_index']},{r['prediction']},{r['label']}"
        for r in rows
    ]
    return "\n".join(lines) + "\n"


def _probe_boundary(model: Model, corpus) -> None:
    """Fail if perturbing an earlier video changes any later video's
    prediction logits."""
    videos = sorted({r.video_id for r in corpus if r.frames > 0})
    if len(videos) < 2:
        raise ConfigError("boundary probe needs a corpus with >= 2 videos")

    def logits_by_video(records):
        banks = fresh_banks(model)
        out = {v: [] for v in videos}
        for e in stream_clips(records, model.spec.input_t, model.spec.input_hw):
            if e.is_boundary:
                for bank in banks.values():
                    boundary_reset(bank, e.video_id)
            res = forward_clip(
                model, e.clip, banks, clip_index=e.global_index, video_id=e.video_id
            )
            out[e.video_id].append(res.logits.data.copy())
        return out

    clean = logits_by_video(corpus)
    import copy

    perturbed = copy.deepcopy(corpus)
    perturbed[0].seed += 1  # regenerates every frame of the first video
    dirty = logits_by_video(perturbed)
    first = perturbed[0].video_id
    for v in videos:
        if v == first:
            continue
        for a, b in zip(clean[v], dirty[v]):
            if np.max(np.abs(a - b)) > 0:
                raise CheckFailure(
                    f"boundary leak: video {v} logits changed when video "
                    f"{first} was perturbed"
                )
    log.info("boundary probe passed: no cross-video influence")


def cmd_stream_infer(args) -> int:
    try:
        model = load_checkpoint(args.ckpt)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint {args.ckpt}: {e}") from e
    try:
        with open(args.corpus) as f:
            corpus = corpus_from_json(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read corpus {args.corpus}: {e}") from e
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.probe:
        _probe_boundary(model, corpus)
    if args.resume:
        try:
            skip_until, banks = load_stream_snapshot(args.resume)
        except OSError as e:
            raise ConfigError(f"cannot read snapshot {args.resume}: {e}") from e
    else:
        skip_until, banks = 0, fresh_banks(model)
    prefix = args.out if args.out != "-" else "stream"
    rows = run_stream(
        model, corpus, banks,
        skip_until=skip_until,
        snapshot_every=args.snapshot_every,
        snapshot_prefix=prefix if args.snapshot_every else None,
    )
    _write_out(args.out, _predictions_csv(rows))
    log.info("wrote %d prediction rows to %s", len(rows), args.out)
    return EXIT_OK


# -- trace-rf ----------------------------------------------------------------


def rf_toy_spec(memory_len: int, aug_layers: int, total_layers: int | None = None) -> ModelSpec:
    """Tiny-spatial-size model for empirical receptive-field probes."""
    depth = total_layers or max(aug_layers, 1)
    if aug_layers > depth:
        raise ConfigError("more augmented layers than layers")
    pct = round(100 * aug_layers / depth) if depth else 0
    policy = "all" if aug_layers == depth else f"uniform-{pct}%"
    if aug_layers == 0:
        policy = "none"
    return ModelSpec(
        input_t=2,
        input_hw=8,
        cube_kernel=(2, 4, 4),
        cube_stride=(2, 4, 4),
        cube_channels=8,
        stages=(StageSpec(depth=depth, channels=8, heads=1),),
        kv_stride_initial=(1, 1, 1),
        memory_len=memory_len,
        compression_factor=(1, 2, 2),
        aug_policy=policy,
        num_classes=4,
    )


def cmd_trace_rf(args) -> int:
    lines = ["config,analytic_clips,traced_clips,match"]
    failures = 0
    if args.table:
        base = _load_spec_arg(args.spec)
        lines.append("mode: analytic table for M in 1..4 (reference spec)")
        for m_len in range(1, 5):
            spec = ModelSpec(**{**_spec_kwargs(base), "memory_len": m_len})
            total = analysis.temporal_support_clips(spec)
            lines.append(
                f"M={m_len}: support {total} clips total, "
                f"+{total - 1} past clips ({total - 1}x increase)"
            )
        _write_out(args.out, "\n".join(lines) + "\n")
        return EXIT_OK
    cases = [(0, 1), (1, 2), (2, 4)]
    if args.full_config:
        cases.append((2, 8))
    for m_len, l_aug in cases:
        spec = rf_toy_spec(m_len, l_aug, total_layers=max(l_aug, 1))
        analytic = analysis.temporal_support_clips(spec)
        model = build_model(spec, seed=args.seed)
        traced = analysis.trace_receptive_field(model, probe_clip_count=analytic + args.probe_slack)
        ok = traced == analytic
        failures += 0 if ok else 1
        lines.append(f"M={m_len}/L_aug={l_aug},{analytic},{traced},{'yes' if ok else 'NO'}")
        log.info("M=%d L_aug=%d: analytic %d traced %d", m_len, l_aug, analytic, traced)
    _write_out(args.out, "\n".join(lines) + "\n")
    if failures:
        raise CheckFailure(f"{failures} receptive-field trace(s) disagree with the formula")
    return EXIT_OK


def _spec_kwargs(spec: ModelSpec) -> dict:
    from dataclasses import asdict

    d = asdict(spec)
    d["stages"] = spec.stages
    return d


# -- grad-check --------------------------------------------------------------


def cmd_grad_check(args) -> int:
    from .autodiff import add, cross_entropy_logits, grad_check
    from .memory import bank_serialize as bser, bank_deserialize as bdes

    spec = ModelSpec(
        input_t=2, input_hw=8,
        cube_kernel=(2, 2, 2), cube_stride=(1, 2, 2), cube_channels=4,
        stages=(
            StageSpec(depth=1, channels=4, heads=1),
            StageSpec(depth=1, channels=8, heads=2, q_stride=(1, 2, 2)),
        ),
        kv_stride_initial=(1, 2, 2), memory_len=1,
        compression_factor=(2, 2, 2), aug_policy="uniform-50%",
        num_classes=3,
    )
    model = build_model(spec, seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    clips = [rng.standard_normal((2, 8, 8, 3)) for _ in range(3)]
    labels = [0, 2, 1]
    banks = fresh_banks(model)
    snaps = []
    for ci, clip in enumerate(clips):
        snaps.append({i: bser(b) for i, b in banks.items()})
        forward_clip(model, clip, banks, clip_index=ci, video_id=0)

    def f():
        total = None
        for ci, clip in enumerate(clips):
            banks_i = {i: bdes(s) for i, s in snaps[ci].items()}
            out = forward_clip(model, clip, banks_i, clip_index=ci, video_id=0)
            loss = cross_entropy_logits(out.logits, labels[ci])
            total = loss if total is None else add(total, loss)
        return total

    err = grad_check(f, list(model.parameters().values()), eps=args.eps)
    _write_out(args.out, f"max_relative_error,{err:.6e}\ntolerance,{args.tol:.1e}\n")
    log.info("gradient check: max relative error %.3e (tolerance %.1e)", err, args.tol)
    if err > args.tol:
        raise CheckFailure(f"gradient check failed: {err:.3e} > {args.tol:.1e}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="memvit",
        description="Streaming video transformer with cached, compressed "
        "key/value memory: cost analysis, synthetic training, streaming "
        "inference.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench-flops", help="analytical FLOP/memory sweeps (CSV)")
    b.add_argument("--spec", help="model spec JSON (default: 16-layer reference)")
    b.add_argument("--sweep", help="M=0,1,2,3,4 or T=16,32,48 (default M=0..4)")
    b.add_argument("--modes", help="comma list of cost modes (default all)")
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bench_flops)

    t = sub.add_parser("train-synth", help="synthetic recall-task training")
    t.add_argument("--k", type=int, default=2, help="cue offset in clips")
    t.add_argument("--memory-len", type=int, default=2)
    t.add_argument("--steps", type=int, default=1600)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint", help="path for the trained memory model")
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_train_synth)

    s = sub.add_parser("stream-infer", help="streaming inference over a corpus")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True, help="corpus manifest JSON")
    s.add_argument("--snapshot-every", type=int, default=0)
    s.add_argument("--resume", help="stream snapshot to resume from")
    s.add_argument("--probe", action="store_true", help="boundary-isolation probe")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_stream_infer)

    r = sub.add_parser("trace-rf", help="analytic vs empirical receptive field")
    r.add_argument("--spec", help="spec for --table mode")
    r.add_argument("--table", action="store_true", help="analytic M=1..4 table only")
    r.add_argument("--full-config", action="store_true",
                   help="include the 8-augmented-layer probe (slower)")
    r.add_argument("--probe-slack", type=int, default=2)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", default="-")
    r.set_defaults(func=cmd_trace_rf)

    g = sub.add_parser("grad-check", help="finite-difference gradient check")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=5e-6)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out", default="-")
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (ConfigError, BankParseError, CheckpointError, ValueError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except CheckFailure as e:
        log.error("check failed: %s", e)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
