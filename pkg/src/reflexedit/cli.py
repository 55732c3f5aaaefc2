"""Command-line surface: edit, invert, sweep, analyze, bench."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attention import save_feature_cache
from .bench import (
    external_scorer,
    load_image,
    load_manifest,
    pca_project,
    run_benchmark,
    save_image,
    sweep_command,
)
from .core import EditConfig, load_config
from .errors import ReflexEditError
from .flow import noised_invert, save_trajectory
from .maskblend import load_mask_png, save_mask_png
from .pipeline import EditRequest, extract_mid_step, reflex_edit, velocity_adapter
from .toy_backend import BackendSpec, ToyBackend, flux_like_spec


def _add_backend_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--backend",
        choices=("toy", "flux-like"),
        default="toy",
        help="toy: 12-layer default model; flux-like: full-scale block topology at toy width",
    )
    parser.add_argument("--backend-seed", type=int, default=0)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config field (repeatable)",
    )


def _add_request_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--image", type=Path, required=True)
    parser.add_argument("--target-prompt", required=True)
    parser.add_argument("--source-prompt", default=None)
    parser.add_argument("--blended-word", default=None)
    parser.add_argument("--mask", type=Path, default=None, help="user-supplied edit mask PNG")


def _build_backend(args: argparse.Namespace) -> ToyBackend:
    if args.backend == "flux-like":
        return ToyBackend(flux_like_spec(seed=args.backend_seed))
    return ToyBackend(BackendSpec(seed=args.backend_seed))


def _build_config(args: argparse.Namespace) -> EditConfig:
    overrides = {}
    for item in args.sets:
        if "=" not in item:
            raise ReflexEditError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        overrides[key] = value
    return load_config(args.config, overrides)


def _build_request(args: argparse.Namespace, config: EditConfig) -> EditRequest:
    return EditRequest(
        image=load_image(args.image),
        target_prompt=args.target_prompt,
        source_prompt=args.source_prompt,
        blended_word=args.blended_word,
        config=config,
        user_mask=load_mask_png(args.mask) if args.mask else None,
    )


def _cmd_edit(args: argparse.Namespace) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    request = _build_request(args, config)
    result = reflex_edit(request, backend)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.image, out / "edited.png")
    if result.final_mask is not None:
        save_mask_png(result.final_mask, out / "mask.png")
    (out / "report.txt").write_text(result.report.to_text(), encoding="utf-8")
    if args.dump_artifacts:
        save_trajectory(result.source_trajectory, out / "trajectory")
        save_feature_cache(result.cache, out / "cache")
    print(f"edited image written to {out / 'edited.png'}")
    return 0


def _cmd_invert(args: argparse.Namespace) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    z_0 = backend.encode(load_image(args.image))
    tokens = backend.tokenize(args.prompt or "")
    rng = np.random.default_rng(config.seed)
    noise = rng.standard_normal(z_0.data.shape, dtype=np.float32)
    traj = noised_invert(
        z_0, config, noise, velocity_adapter(backend, tokens), backend.schedule(config.T)
    )
    save_trajectory(traj, args.out)
    print(f"trajectory with {len(traj.latents)} steps written to {args.out}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    request = _build_request(args, config)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    points = sweep_command(args.kind, values, request, backend, out_dir=args.out)
    for p in points:
        print(f"{args.kind}={p.value:g}  metric={p.metric:.6e}")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    cache, _ = extract_mid_step(load_image(args.image), args.source_prompt, config, backend)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.save_cache:
        save_feature_cache(cache, out / "cache")
    lines = ["# explained variance ratios of residual features, top 3 components"]
    projections = {}
    for layer in cache.res_layers:
        proj, ratios = pca_project(cache.residual[layer], components=3)
        projections[layer] = proj
        lines.append(f"layer {layer}: {ratios[0]:.4f} {ratios[1]:.4f} {ratios[2]:.4f}")
    (out / "explained_variance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _plot_pca(projections, backend.latent_shape[:2], out / "residual_pca.png")
    print(f"analysis written to {out}")
    return 0


def _plot_pca(projections, grid_shape, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = max(len(projections), 1)
    fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6), squeeze=False)
    h, w = grid_shape
    for ax, (layer, proj) in zip(axes[0], sorted(projections.items())):
        rgb = proj.reshape(h, w, 3)
        lo, hi = rgb.min(), rgb.max()
        if hi > lo:
            rgb = (rgb - lo) / (hi - lo)
        ax.imshow(rgb)
        ax.set_title(f"layer {layer}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _cmd_bench(args: argparse.Namespace) -> int:
    backend = _build_backend(args)
    config = _build_config(args)
    cases = load_manifest(args.manifest)
    scorer = external_scorer(args.scorer) if args.scorer else None
    report = run_benchmark(
        cases, config, backend, args.out, workers=args.workers, scorer=scorer
    )
    print(report.to_text(), end="")
    return 0 if report.n_failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reflexedit",
        description="Structure-preserving real-image editing on rectified-flow backends.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_edit = sub.add_parser("edit", help="run one edit")
    _add_request_args(p_edit)
    _add_config_args(p_edit)
    _add_backend_args(p_edit)
    p_edit.add_argument("--out", type=Path, required=True)
    p_edit.add_argument("--dump-artifacts", action="store_true")
    p_edit.set_defaults(fn=_cmd_edit)

    p_invert = sub.add_parser("invert", help="noised inversion, serialized per step")
    p_invert.add_argument("--image", type=Path, required=True)
    p_invert.add_argument("--prompt", default=None)
    _add_config_args(p_invert)
    _add_backend_args(p_invert)
    p_invert.add_argument("--out", type=Path, required=True)
    p_invert.set_defaults(fn=_cmd_invert)

    p_sweep = sub.add_parser("sweep", help="sweep t_prime, k, or alpha")
    p_sweep.add_argument("--kind", choices=("t_prime", "k", "alpha"), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    _add_request_args(p_sweep)
    _add_config_args(p_sweep)
    _add_backend_args(p_sweep)
    p_sweep.add_argument("--out", type=Path, required=True)
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_analyze = sub.add_parser("analyze", help="feature extraction diagnostics")
    p_analyze.add_argument("--image", type=Path, required=True)
    p_analyze.add_argument("--source-prompt", default=None)
    _add_config_args(p_analyze)
    _add_backend_args(p_analyze)
    p_analyze.add_argument("--out", type=Path, required=True)
    p_analyze.add_argument("--save-cache", action="store_true")
    p_analyze.set_defaults(fn=_cmd_analyze)

    p_bench = sub.add_parser("bench", help="run a benchmark manifest")
    p_bench.add_argument("--manifest", type=Path, required=True)
    _add_config_args(p_bench)
    _add_backend_args(p_bench)
    p_bench.add_argument("--out", type=Path, required=True)
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--scorer", default=None, help="executable: (image, prompt) -> float")
    p_bench.set_defaults(fn=_cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ReflexEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
