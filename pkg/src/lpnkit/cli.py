"""``lpnkit`` command line: files in, files out.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, ppo
from .errors import CheckpointError, ConfigError, NumericalError
from .policy import load_checkpoint
from .sim import make_env

log = logging.getLogger("lpnkit")

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4
REQUIRED_KEYS = ("env",)

# method label -> (policy kind, regularizer, w_action)
BASELINES = {
    "lpn_jac_pen": ("lpn", "jac_pen", None),
    "ff_jac_pen": ("ff", "jac_pen", None),
    "ff_lipschitz": ("ff", "lipschitz", None),
    "ff_none": ("ff", "none", None),
    "ff_action_0.01": ("ff", "action_change_reward", 0.01),
    "ff_action_0.1": ("ff", "action_change_reward", 0.1),
    "ff_action_1": ("ff", "action_change_reward", 1.0),
}
METRIC_NAMES = ("reward", "action_smoothness", "high_freq_ratio", "motion_jerk")


# configuration -------------------------------------------------------------------

@dataclass
class RunConfig:
    train: ppo.TrainConfig
    out_dir: str = "runs/default"
    eval_episodes: int = 3
    eval_seed: int = 0
    save_actions: bool = False  # write the evaluation action trace after training

    def as_lines(self) -> list[str]:
        lines = [f"{k} = {_render(v)}" for k, v in dataclasses.asdict(self.train).items()]
        for f in dataclasses.fields(self):
            if f.name != "train":
                lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return lines

    def render(self) -> str:
        return "# lpnkit run configuration\n" + "\n".join(self.as_lines()) + "\n"


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_fields() -> dict[str, str]:
    return {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "train"}


def _coerce(raw: str, kind, where: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` text with ``#`` comments."""
    train_fields = ppo.config_fields()
    run_fields = _run_fields()
    seen: dict[str, int] = {}
    train_kw, run_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        where = f"{source}:{lineno}: field '{key}'"
        if key in seen:
            raise ConfigError(f"{where}: duplicate key (first set on line {seen[key]})")
        seen[key] = lineno
        if key in train_fields:
            train_kw[key] = _coerce(raw, train_fields[key], where)
        elif key in run_fields:
            run_kw[key] = _coerce(raw, run_fields[key], where)
        else:
            raise ConfigError(f"{where}: unknown key")
    for key in REQUIRED_KEYS:
        if key not in seen:
            raise ConfigError(f"{source}: field '{key}': required key missing")
    cfg = RunConfig(ppo.TrainConfig(**train_kw), **run_kw)
    try:
        cfg.train.validate()
    except ConfigError as exc:
        name, _, detail = str(exc).partition(":")
        # point at the offending line, or at a related key the file did set
        lineno = seen.get(name) or next((seen[k] for k in seen if k in detail), None)
        prefix = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{prefix}: field '{name}':{detail}") from None
    if cfg.eval_episodes <= 0:
        raise ConfigError(f"{source}:{seen['eval_episodes']}: field 'eval_episodes': must be positive")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# csv helpers ------------------------------------------------------------------------

def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise ConfigError(f"{path}: CSV has no data rows")
    return rows[0], rows[1:]


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def _fmt(v) -> str:
    return repr(float(v))


def actions_csv(trace: analysis.ActionTrace) -> tuple[list[str], list[list[str]]]:
    m = trace.episodes[0].shape[1] if trace.episodes else 0
    header = ["episode", "step", "t"] + [f"a{j}" for j in range(m)]
    rows = []
    for e, ep in enumerate(trace.episodes):
        for t, a in enumerate(ep):
            rows.append([str(e), str(t), _fmt(t / trace.rate_hz)] + [_fmt(v) for v in a])
    return header, rows


# commands -------------------------------------------------------------------------

def _evaluate(policy, env_name: str, episodes: int, seed: int) -> tuple[dict, analysis.EvalResult]:
    res = analysis.evaluate_policy(policy, make_env(env_name), episodes=episodes, seed=seed)
    return analysis.smoothness_metrics(res), res


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.render())
    result = ppo.train(cfg.train, checkpoint_path=out / "checkpoint.json")
    ppo.write_outputs(result, out)
    last = result.stats[-1]
    print(f"trained {cfg.train.policy}/{cfg.train.regularizer} on {cfg.train.env}: "
          f"{len(result.stats)} iterations, final imitation reward {last.reward_imitation:.4f}")
    if cfg.save_actions:
        _, res = _evaluate(result.policy, cfg.train.env, cfg.eval_episodes, cfg.eval_seed)
        _write_rows(out / "actions.csv", *actions_csv(res.actions))
    return 0


def cmd_eval(args) -> int:
    runs = []
    for i, ckpt in enumerate(args.checkpoint):
        policy = load_checkpoint(ckpt)
        metrics, res = _evaluate(policy, args.env, args.episodes, args.seed)
        runs.append((str(i), metrics))
        if args.actions and i == 0:
            _write_rows(args.actions, *actions_csv(res.actions))
    if len(runs) == 1:
        text = analysis.format_metrics_csv(runs[0][1])
        summary = analysis.summarize(runs[0][1])
    else:
        mean = {k: float(np.mean([m[k] for _, m in runs])) for k in METRIC_NAMES}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "metric", "value"])
        for label, metrics in runs + [("mean", mean)]:
            for k in METRIC_NAMES:
                w.writerow([label, k, _fmt(metrics[k])])
        text = buf.getvalue()
        summary = analysis.summarize(mean)
    _emit(text, args.out)
    print(summary, file=sys.stderr if args.out is None else sys.stdout)
    return 0


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _lpn_schedule(args):
    policy = load_checkpoint(args.checkpoint)
    if policy.kind != "lpn":
        raise ConfigError(f"{args.checkpoint}: gain schedules need an LPN checkpoint, got {policy.kind}")
    env = make_env(args.env)
    action_hz = args.action_hz if args.action_hz is not None else env.spec.control_hz
    return analysis.export_schedule(policy, env, args.gain_hz, action_hz), env


def cmd_export(args) -> int:
    schedule, _ = _lpn_schedule(args)
    analysis.write_schedule(schedule, args.out)
    print(f"wrote {schedule.steps} steps at {schedule.gain_hz}/{schedule.action_hz} Hz to {args.out}")
    return 0


def cmd_reduce(args) -> int:
    schedule, env = _lpn_schedule(args)
    full_rank = min(schedule.m, schedule.n)
    if not 1 <= args.k <= full_rank:
        raise ConfigError(f"k: must be in [1, {full_rank}], got {args.k}")
    full = analysis.playback(schedule, env, args.episodes, args.seed).reward
    ranks = range(1, full_rank + 1) if args.sweep else sorted({args.k, full_rank})
    rows = []
    for k in ranks:
        reduced = analysis.reduce_gains(schedule, k)
        if k == args.k:
            analysis.write_schedule(reduced, args.out)
        reward = analysis.playback(reduced, env, args.episodes, args.seed).reward
        ratio = reward / full if full != 0 else float("nan")
        rows.append([str(k), _fmt(reward), _fmt(ratio)])
    report = args.report or str(Path(args.out).with_suffix("")) + "_report.csv"
    _write_rows(report, ["rank", "reward", "ratio"], rows)
    for k, reward, ratio in rows:
        print(f"rank {k}: reward {float(reward):.6f} ({float(ratio):.4f} of full rank)")
    return 0


def cmd_playback(args) -> int:
    try:
        schedule = analysis.read_schedule(args.schedule)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{args.schedule}: {exc}") from None
    res = analysis.playback(schedule, make_env(args.env), args.episodes, args.seed)
    metrics = analysis.smoothness_metrics(res)
    _emit(analysis.format_metrics_csv(metrics), args.out)
    if args.out is not None:
        print(analysis.summarize(metrics))
    return 0


def cmd_compare(args) -> int:
    base = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = args.methods.split(",") if args.methods else list(BASELINES)
    for name in methods:
        if name not in BASELINES:
            raise ConfigError(f"methods: unknown method {name!r}; choose from {', '.join(BASELINES)}")
    out = Path(args.out or base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(base.render())
    per_seed, table = [], []
    for name in methods:
        kind, reg, w_action = BASELINES[name]
        results = []
        for seed in seeds:
            tc = dataclasses.replace(base.train, policy=kind, regularizer=reg, seed=seed)
            if w_action is not None:
                tc = dataclasses.replace(tc, w_action=w_action)
            result = ppo.train(tc)
            ppo.write_outputs(result, out / name / f"seed{seed}")
            metrics, _ = _evaluate(result.policy, tc.env, base.eval_episodes, base.eval_seed)
            results.append(metrics)
            per_seed.append([name, str(seed)] + [_fmt(metrics[k]) for k in METRIC_NAMES])
            print(f"{name} seed {seed}: " + ", ".join(f"{k}={metrics[k]:.4g}" for k in METRIC_NAMES))
        table.append([name] + [_fmt(np.mean([r[k] for r in results])) for k in METRIC_NAMES])
    _write_rows(out / "runs.csv", ["method", "seed", *METRIC_NAMES], per_seed)
    _write_rows(out / "table.csv", ["method", *METRIC_NAMES], table)
    return 0


# plots ----------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H, PAD = 640, 400, 56


def _num(v: float) -> str:
    return f"{v:.2f}"


def _svg(body: list[str], title: str) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" '
            f'font-size="15">{_escape(title)}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axes(x0, x1, y0, y1, xlabel, ylabel) -> list[str]:
    out = [f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>']
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        px = PAD + frac * (W - 2 * PAD)
        py = H - PAD - frac * (H - 2 * PAD)
        out.append(f'<text x="{px:.1f}" y="{H - PAD + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{xv:.4g}</text>')
        out.append(f'<text x="{PAD - 6}" y="{py + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{yv:.4g}</text>')
    out.append(f'<text x="{W / 2:.0f}" y="{H - 14}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{_escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{H / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {H / 2:.0f})">{_escape(ylabel)}</text>')
    return out


def _range(vals) -> tuple[float, float]:
    lo, hi = float(np.min(vals)), float(np.max(vals))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def line_plot(series: list[tuple[str, np.ndarray, np.ndarray]], title, xlabel, ylabel) -> str:
    if not series or any(len(x) == 0 for _, x, _ in series):
        raise ConfigError("plot: nothing to draw")
    x0, x1 = _range(np.concatenate([x for _, x, _ in series]))
    y0, y1 = _range(np.concatenate([y for _, _, y in series]))
    body = _axes(x0, x1, y0, y1, xlabel, ylabel)
    for i, (label, x, y) in enumerate(series):
        px = PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)
        py = H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(px, py))
        color = PALETTE[i % len(PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * i}" font-family="sans-serif" font-size="11" '
                    f'fill="{color}">{_escape(label)}</text>')
    return _svg(body, title)


def bar_plot(groups: list[tuple[str, dict[str, float]]], title) -> str:
    metrics = list(groups[0][1]) if groups else []
    if not metrics:
        raise ConfigError("plot: nothing to draw")
    body = []
    slot = (W - 2 * PAD) / len(metrics)
    bar = slot * 0.8 / len(groups)
    for j, metric in enumerate(metrics):
        vals = [g[metric] for _, g in groups]
        top = max(abs(v) for v in vals) or 1.0
        for i, v in enumerate(vals):
            h = abs(v) / top * (H - 2 * PAD - 20)
            x = PAD + j * slot + slot * 0.1 + i * bar
            body.append(f'<rect x="{_num(x)}" y="{_num(H - PAD - h)}" width="{_num(bar)}" height="{_num(h)}" '
                        f'fill="{PALETTE[i % len(PALETTE)]}"/>')
            body.append(f'<text x="{_num(x + bar / 2)}" y="{_num(H - PAD - h - 3)}" text-anchor="middle" '
                        f'font-family="sans-serif" font-size="9">{v:.3g}</text>')
        body.append(f'<text x="{_num(PAD + (j + 0.5) * slot)}" y="{H - PAD + 16}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{_escape(metric)}</text>')
    body.append(f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>')
    for i, (label, _) in enumerate(groups):
        body.append(f'<text x="{PAD}" y="{44 + 14 * i}" font-family="sans-serif" font-size="11" '
                    f'fill="{PALETTE[i % len(PALETTE)]}">{_escape(label)}</text>')
    return _svg(body, title)


def _floats(rows, col, path) -> np.ndarray:
    try:
        return np.array([float(r[col]) for r in rows])
    except (ValueError, IndexError):
        raise ConfigError(f"{path}: non-numeric or missing values in column {col}") from None


def _detect_kind(header: list[str]) -> str:
    if header[:2] == ["metric", "value"]:
        return "bars"
    if header and header[0] == "iter":
        return "curve"
    if header[:3] == ["episode", "step", "t"]:
        return "actions"
    raise ConfigError(f"plot: unrecognised CSV header {','.join(header)!r}")


def cmd_plot(args) -> int:
    tables = [(p, *_read_csv(p)) for p in args.csv]
    kinds = {_detect_kind(h) for _, h, _ in tables}
    kind = args.kind or (kinds.pop() if len(kinds) == 1 else None)
    if kind is None:
        raise ConfigError("plot: inputs mix CSV kinds; pass --kind")
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or Path(p).stem for p, _, _ in tables]
    if len(labels) != len(tables):
        raise ConfigError("labels: need one label per CSV")
    if kind == "curve":
        series = []
        for label, (path, header, rows) in zip(labels, tables):
            if args.column not in header:
                raise ConfigError(f"{path}: no column {args.column!r}")
            series.append((label, _floats(rows, 0, path), _floats(rows, header.index(args.column), path)))
        svg = line_plot(series, args.title or "Learning curves", "iteration", args.column)
    elif kind == "actions":
        series = []
        for label, (path, header, rows) in zip(labels, tables):
            ep_rows = [r for r in rows if r[0] == str(args.episode)]
            if not ep_rows:
                raise ConfigError(f"{path}: no rows for episode {args.episode}")
            for j in range(3, len(header)):
                series.append((f"{label} {header[j]}", _floats(ep_rows, 2, path), _floats(ep_rows, j, path)))
        svg = line_plot(series, args.title or "Control actions", "time [s]", "action [rad]")
    else:
        groups = []
        for label, (path, header, rows) in zip(labels, tables):
            if header[:2] != ["metric", "value"]:
                raise ConfigError(f"{path}: bar plots need a metric,value CSV")
            groups.append((label, {r[0]: float(r[1]) for r in rows}))
        svg = bar_plot(groups, args.title or "Smoothness metrics")
    _emit(svg, args.out)
    return 0


# entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpnkit", description="Train and analyse smooth imitation policies.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a policy from a config file")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (overrides out_dir)")
    s.set_defaults(func=cmd_train)

    def eval_opts(s):
        s.add_argument("--env", required=True)
        s.add_argument("--episodes", type=int, default=3)
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="evaluate checkpoints; several checkpoints add a mean row")
    s.add_argument("checkpoint", nargs="+")
    eval_opts(s)
    s.add_argument("--out", help="metrics CSV path (default stdout)")
    s.add_argument("--actions", help="also write the first checkpoint's action trace CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="export an LPN gain schedule")
    s.add_argument("checkpoint")
    s.add_argument("--env", required=True)
    s.add_argument("--gain-hz", type=int, default=30)
    s.add_argument("--action-hz", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("reduce", help="export a rank-k reduced schedule and report retained reward")
    s.add_argument("checkpoint")
    eval_opts(s)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--gain-hz", type=int, default=30)
    s.add_argument("--action-hz", type=int)
    s.add_argument("--sweep", action="store_true", help="report every rank from 1 to full")
    s.add_argument("--out", required=True, help="reduced schedule path")
    s.add_argument("--report", help="rank/reward CSV path (default <out>_report.csv)")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("playback", help="run a gain schedule without the network")
    s.add_argument("schedule")
    eval_opts(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_playback)

    s = sub.add_parser("plot", help="render stats, action or metric CSVs as SVG")
    s.add_argument("csv", nargs="+")
    s.add_argument("--kind", choices=("curve", "actions", "bars"))
    s.add_argument("--column", default="reward_imitation", help="stats column for learning curves")
    s.add_argument("--episode", type=int, default=0, help="episode for action plots")
    s.add_argument("--labels", help="comma-separated legend labels")
    s.add_argument("--title")
    s.add_argument("--out", help="SVG path (default stdout)")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("compare", help="run the baseline matrix and write a comparison table")
    s.add_argument("config")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--methods", help=f"subset of {','.join(BASELINES)}")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"lpnkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckpointError as exc:
        print(f"lpnkit: bad input file: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"lpnkit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"lpnkit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
