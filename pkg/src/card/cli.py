"""Command-line entry point.

Subcommands: estimate-cov, make-cov, perturb-cov, simulate, degrade,
restore, eval, ablate-perturb, ablate-patch.

Every option can also come from a JSON config file (--config); explicit
flags win over the file, which wins over built-in defaults. Each run
echoes its fully resolved configuration to run.json in the output
directory, and re-running with --config run.json reproduces the artifacts
byte for byte. Outputs are written atomically (temp file + rename).
Exit codes: 0 success, 1 validation error, 2 runtime/capacity error.
"""

import argparse
import json
import os
import sys
import tempfile
from contextlib import contextmanager

from . import covariance, harness, sampler
from .covariance import (CovarianceError, build_synthetic_covariance,
                         cholesky_whitener, estimate_covariance,
                         load_covariance, make_patch_grid,
                         perturb_covariance, sample_correlated_noise,
                         save_covariance)
from .harness import ManifestError
from .operators import (CapacityError, PatchWhitener, build_operator,
                        parse_task, whiten_operator)
from .sampler import (DenoiserProtocolError, ExternalDenoiser, SamplerConfig,
                      parse_denoiser)
from .tensorio import (ImageFormatError, PlanarImage, RawTensorFormatError,
                       load_image, save_image)

REQUIRED = "__required__"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# Option plumbing: every value is carried as a string so that config-file
# round trips are exact; handlers convert at the point of use.
# ---------------------------------------------------------------------------


def as_int(text):
    return int(text)


def as_float(text):
    return float(text)


def as_patch(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"expected HxW patch syntax, got {text!r}") from None


def as_sizes(text):
    return [as_patch(part) for part in text.split(",")]


def as_int_list(text):
    return [int(part) for part in text.split(",")]


def as_float_list(text):
    return [float(part) for part in text.split(",")]


def as_str_list(text):
    return [part.strip() for part in text.split(",") if part.strip()]


# option rows: (flag, default, help); default REQUIRED means the value must
# come from a flag or the config file, None means genuinely optional.
_COMMON = [
    ("--seed", "0", "master seed"),
    ("--threads", "1", "worker threads for independent images"),
    ("--out-dir", None, "directory for run.json (default: alongside output)"),
    ("--config", None, "JSON config file; flags take precedence"),
]

_SAMPLER_OPTS = [
    ("--eta", "0.8", "stochasticity parameter"),
    ("--eta-b", "1.0", "measurement blend parameter"),
    ("--nfe", "20", "denoiser evaluations per image"),
    ("--steps", "1000", "full schedule length T"),
    ("--sigma-max", "1.0", "largest schedule noise level"),
]

_SYNTH_OPTS = [
    ("--size", "32x32", "synthetic image size HxW"),
    ("--seeds", "10", "number of synthetic seeds (0..n-1)"),
    ("--channels", "1", "synthetic image channels"),
    ("--tau", "0.3", "gaussian prior std"),
    ("--mu", "0.5", "gaussian prior mean"),
]

SUBCOMMANDS = {
    "estimate-cov": [
        ("--dark-dir", REQUIRED, "directory of dark-frame PNGs"),
        ("--patch", "8x8", "patch size HxW"),
        ("--out", REQUIRED, "output covariance file (.ct)"),
    ],
    "make-cov": [
        ("--sigma", "1.0", "base noise scale"),
        ("--alpha", REQUIRED, "band correlation strength"),
        ("--bands", REQUIRED, "comma-separated band offsets, e.g. 1,8"),
        ("--eps", "0.0", "diagonal regularization"),
        ("--patch", "8x8", "patch size HxW"),
        ("--out", REQUIRED, "output covariance file (.ct)"),
    ],
    "perturb-cov": [
        ("--in", REQUIRED, "input covariance file"),
        ("--level", REQUIRED, "relative Frobenius perturbation level"),
        ("--out", REQUIRED, "output covariance file"),
    ],
    "simulate": [
        ("--input", REQUIRED, "clean input PNG"),
        ("--cov", REQUIRED, "covariance file"),
        ("--sigma-y", REQUIRED, "noise level"),
        ("--bit-depth", "16", "output PNG bit depth"),
        ("--out", REQUIRED, "noisy output PNG"),
    ],
    "degrade": [
        ("--input", REQUIRED, "clean input PNG"),
        ("--task", REQUIRED, "degradation task"),
        ("--cov", None, "covariance file (required when sigma-y > 0)"),
        ("--sigma-y", "0.0", "noise level"),
        ("--sv-threshold", "0.03", "singular value truncation threshold"),
        ("--bit-depth", "16", "output PNG bit depth"),
        ("--out", REQUIRED, "degraded output PNG"),
    ],
    "restore": [
        ("--input", REQUIRED, "measurement PNG"),
        ("--task", "denoise", "degradation task"),
        ("--cov", None, "covariance file (required in whitened mode)"),
        ("--sigma-y", REQUIRED, "measurement noise level"),
        ("--mode", "whitened", "whitened or plain"),
        ("--denoiser", "gaussian:tau=0.3",
         "gaussian:tau=..[,mu=..] or external:<cmd>"),
        ("--sv-threshold", "0.03", "singular value truncation threshold"),
        ("--bit-depth", "16", "output PNG bit depth"),
        ("--out", REQUIRED, "restored output PNG"),
    ] + _SAMPLER_OPTS,
    "eval": [
        ("--manifest", None, "dataset root (manifest mode)"),
        ("--level", "high", "dataset noise level to evaluate"),
        ("--cov", None, "covariance file (synthetic mode)"),
        ("--task", "denoise", "degradation task"),
        ("--sigma-y", "0.5", "noise level (synthetic mode)"),
        ("--sigma-y-grid", "0.1", "comma grid of sigma-y (manifest mode)"),
        ("--modes", "whitened,plain", "methods to run"),
        ("--patch", "8x8", "patch size HxW"),
        ("--report", REQUIRED, "output CSV path"),
        ("--json", None, "output JSON path (default: report with .json)"),
    ] + _SYNTH_OPTS + _SAMPLER_OPTS,
    "ablate-perturb": [
        ("--levels", REQUIRED, "comma list of perturbation levels incl. 0"),
        ("--cov", REQUIRED, "covariance file"),
        ("--task", "denoise", "degradation task"),
        ("--sigma-y", "0.5", "noise level"),
        ("--perturb-seed", "0", "seed for the symmetric perturbation"),
        ("--report", REQUIRED, "output CSV path"),
        ("--summary", None, "summary JSON path (default: report with .json)"),
    ] + _SYNTH_OPTS + _SAMPLER_OPTS,
    "ablate-patch": [
        ("--sizes", REQUIRED, "comma list of patch sizes, e.g. 8x8,4x128"),
        ("--dark-dir", REQUIRED, "directory of dark-frame PNGs"),
        ("--cov", REQUIRED, "true noise covariance file"),
        ("--task", "denoise", "degradation task"),
        ("--sigma-y", "0.5", "noise level"),
        ("--report", REQUIRED, "output CSV path"),
        ("--summary", None, "summary JSON path (default: report with .json)"),
    ] + _SYNTH_OPTS + _SAMPLER_OPTS,
}


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def _resolve_options(name, args):
    """Layer explicit flags over the config file over defaults."""
    spec = SUBCOMMANDS[name] + _COMMON
    file_values = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config JSON: {exc}") from exc
        if isinstance(doc, dict) and "options" in doc:
            if doc.get("subcommand") not in (None, name):
                raise UsageError(
                    f"config file is for subcommand {doc.get('subcommand')!r},"
                    f" not {name!r}")
            doc = doc["options"]
        file_values = {k: (None if v is None else str(v)) for k, v in doc.items()}
        file_values["config"] = args.config

    resolved = {}
    missing = []
    for flag, default, _ in spec:
        dest = _dest(flag)
        explicit = getattr(args, dest)
        if explicit is not None:
            resolved[dest] = explicit
        elif file_values.get(dest) is not None:
            resolved[dest] = file_values[dest]
        elif default is REQUIRED:
            resolved[dest] = None
            missing.append(flag)
        else:
            resolved[dest] = default
    if missing:
        raise UsageError(f"{name}: missing required options: {', '.join(missing)}")
    return resolved


@contextmanager
def atomic_path(final_path):
    directory = os.path.dirname(os.path.abspath(final_path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, final_path)
        tmp = None
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.remove(tmp)


def _write_run_json(name, cfg):
    out_dir = cfg.get("out_dir")
    if out_dir is None:
        primary = cfg.get("out") or cfg.get("report") or "."
        out_dir = os.path.dirname(os.path.abspath(primary)) or "."
    os.makedirs(out_dir, exist_ok=True)
    doc = {"subcommand": name,
           "options": {k: v for k, v in sorted(cfg.items()) if k != "config"}}
    path = os.path.join(out_dir, "run.json")
    with atomic_path(path) as tmp:
        with open(tmp, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return path


def _save_cov_atomic(cov, out):
    with atomic_path(out) as tmp:
        save_covariance(cov, tmp)
        with atomic_path(covariance.sidecar_path(out)) as tmp_side:
            os.replace(covariance.sidecar_path(tmp), tmp_side)


def _save_image_atomic(img, out, bit_depth):
    with atomic_path(out) as tmp:
        save_image(img, tmp, bit_depth)


def _write_text_atomic(text, out):
    with atomic_path(out) as tmp:
        with open(tmp, "w") as fh:
            fh.write(text)


def _write_json_atomic(doc, out):
    _write_text_atomic(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)


def _load_dark_frames(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dark-frame directory not found: {directory}")
    names = sorted(f for f in os.listdir(directory) if f.endswith(".png"))
    if not names:
        raise ValueError(f"no PNG dark frames in {directory}")
    return [load_image(os.path.join(directory, f)) for f in names]


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------


def cmd_estimate_cov(cfg):
    frames = _load_dark_frames(cfg["dark_dir"])
    ph, pw = as_patch(cfg["patch"])
    cov = estimate_covariance(frames, ph, pw)
    cov.provenance["source_id"] = os.path.basename(os.path.normpath(cfg["dark_dir"]))
    _save_cov_atomic(cov, cfg["out"])


def cmd_make_cov(cfg):
    ph, pw = as_patch(cfg["patch"])
    cov = build_synthetic_covariance(as_float(cfg["sigma"]), as_float(cfg["alpha"]),
                                     as_int_list(cfg["bands"]), as_float(cfg["eps"]),
                                     ph, pw)
    _save_cov_atomic(cov, cfg["out"])


def cmd_perturb_cov(cfg):
    cov = load_covariance(cfg["in"])
    out = perturb_covariance(cov, as_float(cfg["level"]), as_int(cfg["seed"]))
    _save_cov_atomic(out, cfg["out"])


def cmd_simulate(cfg):
    img = load_image(cfg["input"])
    cov = load_covariance(cfg["cov"])
    grid = make_patch_grid(img.height, img.width, cov.patch_h, cov.patch_w)
    noise = sample_correlated_noise(cov, as_float(cfg["sigma_y"]), grid,
                                    img.channels, as_int(cfg["seed"]))
    noisy = PlanarImage(img.data + noise.data)
    _save_image_atomic(noisy, cfg["out"], as_int(cfg["bit_depth"]))


def cmd_degrade(cfg):
    img = load_image(cfg["input"])
    spec = parse_task(cfg["task"], as_float(cfg["sv_threshold"]))
    op = build_operator(spec, img.height, img.width, img.channels)
    out_h, out_w = op.out_shape
    measured = op.apply(img.data.reshape(img.channels, op.d))
    measured = measured.reshape(img.channels, out_h, out_w)
    sigma_y = as_float(cfg["sigma_y"])
    if sigma_y > 0:
        if cfg["cov"] is None:
            raise UsageError("degrade: --cov is required when --sigma-y > 0")
        cov = load_covariance(cfg["cov"])
        grid = make_patch_grid(out_h, out_w, cov.patch_h, cov.patch_w)
        noise = sample_correlated_noise(cov, sigma_y, grid, img.channels,
                                        as_int(cfg["seed"]))
        measured = measured + noise.data
    _save_image_atomic(PlanarImage(measured), cfg["out"], as_int(cfg["bit_depth"]))


def cmd_restore(cfg):
    y = load_image(cfg["input"])
    spec = parse_task(cfg["task"], as_float(cfg["sv_threshold"]))
    scale = spec.scale if spec.kind == "block_average" else 1
    height, width = y.height * scale, y.width * scale
    op = build_operator(spec, height, width, y.channels)
    config = SamplerConfig(sigma_y=as_float(cfg["sigma_y"]),
                           eta=as_float(cfg["eta"]),
                           eta_b=as_float(cfg["eta_b"]),
                           nfe=as_int(cfg["nfe"]),
                           seed=as_int(cfg["seed"]),
                           mode=cfg["mode"])
    schedule = sampler.subsample_schedule(
        sampler.make_schedule(as_int(cfg["steps"]), as_float(cfg["sigma_max"])),
        config.nfe)
    denoiser = parse_denoiser(cfg["denoiser"])
    whitener = None
    run_op = op
    if config.mode == "whitened":
        if cfg["cov"] is None:
            raise UsageError("restore: --cov is required in whitened mode")
        cov = load_covariance(cfg["cov"])
        grid = make_patch_grid(y.height, y.width, cov.patch_h, cov.patch_w)
        wt = cholesky_whitener(cov)
        run_op = whiten_operator(op, wt, grid)
        whitener = PatchWhitener(wt, grid)
    try:
        restored = sampler.run_sampler(run_op, y, denoiser, config, schedule,
                                       whitener)
    finally:
        if isinstance(denoiser, ExternalDenoiser):
            denoiser.close()
    _save_image_atomic(restored, cfg["out"], as_int(cfg["bit_depth"]))


def _synthetic_spec(cfg, cov):
    h, w = as_patch(cfg["size"])
    return harness.SyntheticSpec(
        cov=cov,
        task=parse_task(cfg["task"]),
        sigma_y=as_float(cfg["sigma_y"]),
        seeds=tuple(range(as_int(cfg["seeds"]))),
        height=h, width=w,
        channels=as_int(cfg["channels"]),
        prior_mean=as_float(cfg["mu"]),
        prior_std=as_float(cfg["tau"]),
        nfe=as_int(cfg["nfe"]),
        eta=as_float(cfg["eta"]),
        eta_b=as_float(cfg["eta_b"]),
        T=as_int(cfg["steps"]),
        sigma_max=as_float(cfg["sigma_max"]),
    )


class _PartialWriter:
    """Streams rows to <report>.partial as chunks complete, so a failing
    run still leaves its finished rows on disk."""

    def __init__(self, report):
        os.makedirs(os.path.dirname(os.path.abspath(report)) or ".",
                    exist_ok=True)
        self.path = report + ".partial"
        self.fh = open(self.path, "w")
        self.fh.write(",".join(harness.REPORT_COLUMNS) + "\n")
        self.fh.flush()

    def __call__(self, rows):
        for row in rows:
            self.fh.write(
                f"{row['scene_id']},{row['task']},{row['method']},"
                f"{row['sigma_y']:g},{row['seed']},{row['psnr_db']:.6f},"
                f"{row['ssim']:.6f}\n")
        self.fh.flush()

    def finish(self):
        self.fh.close()
        os.remove(self.path)


def _emit_report(rows, cfg, partial, summary=None, summary_key=None):
    report = cfg["report"]
    extra = {summary_key: summary} if summary is not None else None
    json_path = cfg.get("json") or cfg.get("summary")
    if json_path is None:
        json_path = os.path.splitext(report)[0] + ".json"
    _write_text_atomic(harness.format_csv(rows), report)
    _write_json_atomic(harness.report_json(rows, extra), json_path)
    partial.finish()


def cmd_eval(cfg):
    threads = as_int(cfg["threads"])
    if cfg["manifest"] is None and cfg["cov"] is None:
        raise UsageError("eval: provide --manifest <dir> or --cov <file>")
    partial = _PartialWriter(cfg["report"])
    if cfg["manifest"] is not None:
        manifest = harness.load_manifest(cfg["manifest"])
        rows = harness.run_manifest_experiment(
            manifest, cfg["level"], parse_task(cfg["task"]),
            as_float_list(cfg["sigma_y_grid"]),
            modes=tuple(as_str_list(cfg["modes"])),
            patch=as_patch(cfg["patch"]),
            nfe=as_int(cfg["nfe"]), eta=as_float(cfg["eta"]),
            eta_b=as_float(cfg["eta_b"]), T=as_int(cfg["steps"]),
            sigma_max=as_float(cfg["sigma_max"]), seed=as_int(cfg["seed"]),
            threads=threads, on_rows=partial,
            denoiser=sampler.GaussianPriorDenoiser(as_float(cfg["mu"]),
                                                   as_float(cfg["tau"])))
        if not rows:
            print("warning: manifest contains no scenes; empty report",
                  file=sys.stderr)
    else:
        spec = _synthetic_spec(cfg, load_covariance(cfg["cov"]))
        rows = harness.run_synthetic_experiment(
            spec, modes=tuple(as_str_list(cfg["modes"])), threads=threads,
            on_rows=partial)
    _emit_report(rows, cfg, partial)


def cmd_ablate_perturb(cfg):
    spec = _synthetic_spec(cfg, load_covariance(cfg["cov"]))
    partial = _PartialWriter(cfg["report"])
    rows, summary = harness.ablate_perturbation(
        as_float_list(cfg["levels"]), spec,
        perturb_seed=as_int(cfg["perturb_seed"]),
        threads=as_int(cfg["threads"]), on_rows=partial)
    _emit_report(rows, cfg, partial, summary, "perturbation_summary")


def cmd_ablate_patch(cfg):
    frames = _load_dark_frames(cfg["dark_dir"])
    spec = _synthetic_spec(cfg, load_covariance(cfg["cov"]))
    partial = _PartialWriter(cfg["report"])
    rows, summary = harness.ablate_patch_size(
        as_sizes(cfg["sizes"]), frames, spec, threads=as_int(cfg["threads"]),
        on_rows=partial)
    _emit_report(rows, cfg, partial, summary, "patch_summary")


HANDLERS = {
    "estimate-cov": cmd_estimate_cov,
    "make-cov": cmd_make_cov,
    "perturb-cov": cmd_perturb_cov,
    "simulate": cmd_simulate,
    "degrade": cmd_degrade,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "ablate-perturb": cmd_ablate_perturb,
    "ablate-patch": cmd_ablate_patch,
}


def build_parser():
    parser = _Parser(prog="card")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, opts in SUBCOMMANDS.items():
        p = sub.add_parser(name)
        for flag, _default, help_text in opts + _COMMON:
            p.add_argument(flag, default=None, help=help_text, dest=_dest(flag))
    return parser


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        name = args.subcommand
        cfg = _resolve_options(name, args)
        _write_run_json(name, cfg)
        HANDLERS[name](cfg)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, ImageFormatError,
            RawTensorFormatError, CovarianceError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CapacityError, DenoiserProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
