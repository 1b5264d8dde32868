"""Static SVG log-log plots of experiment summaries (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise RuntimeError("plotting needs matplotlib (pip install 'metromd[plot]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _loglog(series, xlabel, ylabel, path, reference=None):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (x, y) in series.items():
        ax.loglog(x, y, "o-", label=label)
    if reference is not None:
        x, y, label = reference
        ax.loglog(x, y, "k--", lw=0.8, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_report(report):
    """Write the plot matching ``report.experiment``; returns the path or ``None``."""
    res = report.results
    if report.experiment in ("autocorr_fluid", "autocorr_dumbbell"):
        series = {}
        for kind, part in res["partitions"].items():
            pts = sorted((float(h), e) for h, e in part["eps"].items())
            series[f"{kind} (slope {part['slope']:.2f})"] = ([p[0] for p in pts], [p[1] for p in pts])
        xs = [float(h) for h in next(iter(res["partitions"].values()))["eps"]]
        first = next(iter(series.values()))
        anchor_x, anchor_y = first[0][-1], first[1][-1]
        ref = ([min(xs), max(xs)], [anchor_y * (x / anchor_x) ** 2 for x in (min(xs), max(xs))], "h^2")
        return _loglog(series, "h", "relative Richardson error", report.out_dir / "richardson.svg", ref)
    if report.experiment == "scaling":
        series = {}
        for kind in res["slopes"]:
            legs = sorted((int(k.split("/")[1]), v["accept"]) for k, v in res["legs"].items()
                          if k.split("/")[0] == kind)
            series[f"{kind} (slope {res['slopes'][kind]:.3f})"] = ([n for n, _ in legs], [a for _, a in legs])
        return _loglog(series, "n", "mean acceptance per particle", report.out_dir / "acceptance.svg")
    return None
