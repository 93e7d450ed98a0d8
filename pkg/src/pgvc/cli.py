"""Command-line surface: encode, decode, truncate, inspect, train, synth, eval.

Configuration precedence is defaults < config file < flags.  The config
file is flat ``key = value`` text ('#' starts a comment); the schema is
the KNOWN_KEYS table below.  Every subcommand is deterministic given the
same inputs and --seed.

Exit codes: 0 success, 1 expected failure (bad file, hash mismatch,
divergence, ...), 2 usage error.  Failures print exactly one line to
stderr of the form ``pgvc: error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .container import read_container, truncate
from .ctxmodel import (
    INTRA_REFERENCE_POLICIES,
    MASK_VARIANTS,
    ContextModelParams,
    ModelConfig,
    init_params,
    load_model,
    save_model,
    train_step,
    zero_params,
)
from .errors import CodecError, ConfigError
from .frontend import FrontendConfig, read_clip, write_clip
from .msrq import default_schedule
from .pipeline import (
    SYNTH_KINDS,
    CodecConfig,
    decode_video,
    encode_video,
    psnr,
    pyramids_from_clip,
    synth_clip,
)

# config-file schema: key -> (parser, default)
KNOWN_KEYS = {
    "spatial_factor": (int, 4),
    "temporal_factor": (int, 1),
    "d": (int, 32),
    "n_blocks": (int, 2),
    "n_heads": (int, 2),
    "mask": (str, "sparse"),
    "intra_reference": (str, "largest"),
    "max_scales": (int, 8),
    "kappa": (int, None),
    "budget": (int, None),
    "steps": (int, 500),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "batch": (int, 2),
    "n_clips": (int, 8),
    "clip_size": (str, "16x16x5"),
    "synth": (str, "moving_gradient"),
    "seed": (int, 0),
    "log_every": (int, 100),
}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> dict[str, object]:
    """Parse a flat key = value file against the documented schema."""

    values: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        cast = KNOWN_KEYS[key][0]
        try:
            values[key] = cast(value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value {value!r} for {key} "
                f"(expected {cast.__name__})"
            ) from None
    return values


class Settings:
    """Merged view of defaults, the config file, and CLI flags."""

    def __init__(self, args: argparse.Namespace):
        self._file = (
            load_config(args.config) if getattr(args, "config", None) else {}
        )
        self._args = args

    def __getitem__(self, key: str):
        flag = getattr(self._args, key, None)
        if flag is not None:
            return flag
        if key in self._file:
            return self._file[key]
        return KNOWN_KEYS[key][1]

    def rate_target(self) -> tuple[int | None, int | None]:
        """Resolve the kappa/budget pair: a flag for either one silences
        both config-file keys (they are mutually exclusive alternatives)."""

        flag_kappa = getattr(self._args, "kappa", None)
        flag_budget = getattr(self._args, "budget", None)
        if flag_kappa is not None or flag_budget is not None:
            return flag_kappa, flag_budget
        return self._file.get("kappa"), self._file.get("budget")


def parse_size(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"clip size must look like WxHxT, got {text!r}")
    try:
        w, h, t = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"clip size must be three integers, got {text!r}") from None
    if min(w, h, t) < 1:
        raise ConfigError(f"clip size components must be positive, got {text!r}")
    return w, h, t


def _model_config(s: Settings, fcfg: FrontendConfig) -> ModelConfig:
    return ModelConfig(
        d=s["d"],
        n_blocks=s["n_blocks"],
        n_heads=s["n_heads"],
        variant=s["mask"],
        intra_reference=s["intra_reference"],
        max_scales=s["max_scales"],
        bit_length=fcfg.channels,
        seed=s["seed"],
    )


def _frontend_for(params: ContextModelParams, s: Settings) -> FrontendConfig:
    fcfg = FrontendConfig(
        spatial_factor=s["spatial_factor"], temporal_factor=s["temporal_factor"]
    )
    if fcfg.channels != params.config.bit_length:
        raise ConfigError(
            f"frontend s={fcfg.spatial_factor} produces {fcfg.channels} channels "
            f"per token, model expects {params.config.bit_length}"
        )
    return fcfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_encode(args: argparse.Namespace) -> int:
    s = Settings(args)
    clip = read_clip(args.input)
    params = load_model(args.model)
    kappa, budget = s.rate_target()
    cfg = CodecConfig(
        frontend=_frontend_for(params, s),
        model=params.config,
        kappa_p=kappa,
        budget_bits=budget,
    )
    blob, stats = encode_video(clip, cfg, params)
    Path(args.output).write_bytes(blob)
    stats_path = args.stats or (args.output + ".stats.json")
    Path(stats_path).write_text(stats.to_json() + "\n")
    print(
        f"encoded {clip.width}x{clip.height}x{clip.t_total} -> "
        f"{stats.container_bytes} bytes, kappa_P={stats.kappa_p}/{stats.n_scales}, "
        f"{stats.bits_per_pixel:.4f} bpp ({stats.wall_seconds:.2f}s)"
    )
    return 0


def cmd_decode(args: argparse.Namespace) -> int:
    params = load_model(args.model)
    blob = Path(args.input).read_bytes()
    clip, stats = decode_video(blob, params)
    write_clip(clip, args.output)
    if args.stats:
        Path(args.stats).write_text(stats.to_json() + "\n")
    generated = (
        ",".join(map(str, stats.generated_scales)) if stats.generated_scales else "none"
    )
    print(
        f"decoded {stats.width}x{stats.height}x{stats.frames}, "
        f"kappa_P={stats.kappa_p}/{stats.n_scales}, generated scales: {generated} "
        f"({stats.wall_seconds:.2f}s)"
    )
    return 0


def cmd_truncate(args: argparse.Namespace) -> int:
    blob = Path(args.input).read_bytes()
    out = truncate(blob, args.kappa)
    Path(args.output).write_bytes(out)
    print(f"kept kappa_P={args.kappa}: {len(blob)} -> {len(out)} bytes")
    return 0


def inspect_container(blob: bytes) -> dict:
    """Structured per-scale accounting for one container."""

    box = read_container(blob)
    h = box.header
    rows = []
    payload_bits = 0
    intra_bits = 0
    for i, seg in enumerate(box.segments):
        kind, k = h.segment_label(i)
        spec = h.schedule[k]
        frames = 1 if kind == "intra" else h.t_total - 1
        coded = 8 * len(seg.payload)
        payload_bits += coded
        if kind == "intra":
            intra_bits += coded
        rows.append(
            {
                "kind": kind,
                "scale": k,
                "width": spec.width,
                "height": spec.height,
                "bit_length": spec.bit_length,
                "raw_bits": spec.raw_bits(frames),
                "coded_bits": coded,
            }
        )
    for row in rows:
        row["share"] = row["coded_bits"] / payload_bits if payload_bits else 0.0
    return {
        "width": h.width,
        "height": h.height,
        "frames": h.t_total,
        "pad_right": h.pad_right,
        "pad_bottom": h.pad_bottom,
        "spatial_factor": h.spatial_factor,
        "temporal_factor": h.temporal_factor,
        "n_scales": h.n_scales,
        "kappa_p": h.kappa_p,
        "model_hash": f"{h.model_hash:#018x}",
        "container_bytes": len(blob),
        "payload_bits": payload_bits,
        "intra_bits": intra_bits,
        "inter_bits": payload_bits - intra_bits,
        "scales": rows,
    }


def cmd_inspect(args: argparse.Namespace) -> int:
    report = inspect_container(Path(args.input).read_bytes())
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    print(
        f"{report['width']}x{report['height']}x{report['frames']} "
        f"(pad {report['pad_right']}+{report['pad_bottom']}), "
        f"s={report['spatial_factor']} tau={report['temporal_factor']}, "
        f"K={report['n_scales']} kappa_P={report['kappa_p']}"
    )
    print(f"model {report['model_hash']}, {report['container_bytes']} bytes")
    print(f"{'kind':>5} {'k':>2} {'grid':>9} {'raw':>8} {'coded':>8} {'share':>7}")
    for row in report["scales"]:
        grid = f"{row['width']}x{row['height']}x{row['bit_length']}"
        print(
            f"{row['kind']:>5} {row['scale']:>2} {grid:>9} "
            f"{row['raw_bits']:>8} {row['coded_bits']:>8} {row['share']:>6.1%}"
        )
    total = report["payload_bits"]
    intra_share = report["intra_bits"] / total if total else 0.0
    print(
        f"payload {total} bits; intra {report['intra_bits']} ({intra_share:.1%}), "
        f"inter {report['inter_bits']} ({1 - intra_share:.1%})"
    )
    return 0


def _load_corpus(s: Settings, args: argparse.Namespace, cfg: CodecConfig):
    """Quantized pyramids for every training clip (computed once; the
    frontend and quantizer have no trainable state)."""

    clips = []
    if getattr(args, "clips", None):
        paths = sorted(Path(args.clips).glob("*.pgvv"))
        if not paths:
            raise ConfigError(f"no .pgvv clips under {args.clips}")
        clips = [(p.name, read_clip(p)) for p in paths]
    else:
        w, h, t = parse_size(s["clip_size"])
        kind = s["synth"]
        base = s["seed"]
        clips = [
            (f"{kind}-{base + i}", synth_clip(base + i, w, h, t, kind=kind))
            for i in range(s["n_clips"])
        ]
    batch = []
    for _, clip in clips:
        _, intra, inter = pyramids_from_clip(clip, cfg)
        batch.append((intra, inter))
    return clips, batch


def cmd_train(args: argparse.Namespace) -> int:
    s = Settings(args)
    fcfg = FrontendConfig(
        spatial_factor=s["spatial_factor"], temporal_factor=s["temporal_factor"]
    )
    mcfg = _model_config(s, fcfg)
    cfg = CodecConfig(frontend=fcfg, model=mcfg)
    names, corpus = _load_corpus(s, args, cfg)
    params = init_params(mcfg, seed=s["seed"])

    steps = s["steps"]
    batch_size = max(1, min(s["batch"], len(corpus)))
    lr, momentum = s["lr"], s["momentum"]
    log_every = max(1, s["log_every"])
    velocity = None
    print(
        f"training on {len(corpus)} clips ({', '.join(n for n, _ in names[:4])}"
        f"{', ...' if len(names) > 4 else ''}), {steps} steps, "
        f"batch {batch_size}, lr {lr}, momentum {momentum}"
    )
    loss = float("nan")
    for step in range(steps):
        lo = (step * batch_size) % len(corpus)
        batch = [corpus[(lo + j) % len(corpus)] for j in range(batch_size)]
        try:
            # divergence is detected explicitly (TrainError on non-finite
            # loss/grads); silence the overflow warnings on the way there
            # so stderr stays a single machine-parseable line
            with np.errstate(over="ignore", invalid="ignore"):
                loss, params, velocity = train_step(
                    params, batch, lr=lr, momentum=momentum, velocity=velocity
                )
        except CodecError:
            # keep the last finite checkpoint, then report the failure
            save_model(params, args.output)
            raise
        if step % log_every == 0 or step == steps - 1:
            print(f"step {step:5d}  loss {loss:.6f} nats/bit")
    save_model(params, args.output)
    print(f"saved {args.output} (hash {params.weight_hash:#018x})")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    s = Settings(args)
    w, h, t = parse_size(s["clip_size"])
    clip = synth_clip(s["seed"], w, h, t, kind=s["synth"])
    write_clip(clip, args.output)
    print(f"wrote {s['synth']} clip {w}x{h}x{t} (seed {s['seed']}) to {args.output}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    s = Settings(args)
    models: list[tuple[str, ContextModelParams]] = []
    for path in args.models.split(","):
        params = load_model(path)
        models.append((Path(path).stem, params))
    # the uniform (all-zero) model is the fixed baseline row set
    models.append(("uniform", zero_params(models[0][1].config)))

    fcfg = _frontend_for(models[0][1], s)
    w, h, t = parse_size(s["clip_size"])
    kind = s["synth"]
    base = s["seed"]
    clips = [
        (f"{kind}-{base + i}", synth_clip(base + i, w, h, t, kind=kind))
        for i in range(s["n_clips"])
    ]

    grid = (h + fcfg.spatial_factor - 1) // fcfg.spatial_factor
    gridw = (w + fcfg.spatial_factor - 1) // fcfg.spatial_factor
    k_total = len(default_schedule(grid, gridw, fcfg.channels))
    if args.kappas:
        kappas = [
            k_total if tok.strip().upper() == "K" else int(tok)
            for tok in args.kappas.split(",")
        ]
    else:
        kappas = [0, k_total]

    lines = ["model,variant,clip,kappa,bpp,psnr_db,payload_bits,scale_bits"]
    for model_name, params in models:
        cfg_base = CodecConfig(frontend=fcfg, model=params.config)
        variant = params.config.variant
        for kappa in kappas:
            bpps, psnrs, bits = [], [], []
            for clip_name, clip in clips:
                cfg = dataclasses.replace(cfg_base, kappa_p=kappa)
                blob, est = encode_video(clip, cfg, params)
                decoded, _ = decode_video(blob, params)
                quality = psnr(clip, decoded)
                scale_bits = " ".join(
                    str(sc.coded_bits) for sc in est.per_scale if sc.transmitted
                )
                lines.append(
                    f"{model_name},{variant},{clip_name},{kappa},"
                    f"{est.bits_per_pixel:.6f},{quality:.3f},"
                    f"{est.payload_bits},{scale_bits}"
                )
                bpps.append(est.bits_per_pixel)
                psnrs.append(quality)
                bits.append(est.payload_bits)
            lines.append(
                f"{model_name},{variant},aggregate,{kappa},"
                f"{np.mean(bpps):.6f},{np.mean(psnrs):.3f},{int(np.sum(bits))},"
            )
    text = "\n".join(lines) + "\n"
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
        print(f"wrote {len(lines) - 1} rows to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_config_and_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="single seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgvc", description="progressive generative video codec"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="PGVV clip -> PGVC container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--kappa", type=int, help="transmit this many inter scales")
    p.add_argument("--budget", type=int, help="inter payload budget in bits")
    p.add_argument("--stats", help="stats sidecar path (default: <out>.stats.json)")
    _add_config_and_seed(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="PGVC container -> PGVV clip")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--stats", help="optional stats JSON path")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("truncate", help="drop inter scales above kappa")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kappa", type=int, required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_truncate)

    p = sub.add_parser("inspect", help="per-scale bit accounting for a container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="fit a context model on synthetic clips")
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--clips", help="directory of .pgvv clips (else synthetic)")
    p.add_argument("--synth", choices=SYNTH_KINDS)
    p.add_argument("--n-clips", dest="n_clips", type=int)
    p.add_argument("--clip-size", dest="clip_size", help="WxHxT")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--mask", choices=MASK_VARIANTS)
    p.add_argument("--intra-ref", dest="intra_reference",
                   choices=INTRA_REFERENCE_POLICIES)
    p.add_argument("--d", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    _add_config_and_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write a deterministic synthetic clip")
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--kind", dest="synth", choices=SYNTH_KINDS)
    p.add_argument("--size", dest="clip_size", help="WxHxT")
    _add_config_and_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="rate/quality CSV over models x clips x kappas")
    p.add_argument("--models", required=True, help="comma-separated .pgvm paths")
    p.add_argument("--out", dest="output", required=True, help="CSV path or -")
    p.add_argument("--synth", choices=SYNTH_KINDS)
    p.add_argument("--n-clips", dest="n_clips", type=int)
    p.add_argument("--clip-size", dest="clip_size", help="WxHxT")
    p.add_argument("--kappas", help="comma-separated kappa values; K = all scales")
    _add_config_and_seed(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CodecError as exc:
        print(f"pgvc: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pgvc: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
