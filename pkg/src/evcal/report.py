"""Diagnostic images for a calibration result (static PNG files)."""

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .camera import normalize  # noqa: E402
from .config import CalibrationConfig  # noqa: E402
from .geometry import quat_to_rot  # noqa: E402
from .initialization import projected_circles  # noqa: E402
from .results import intrinsics_from, segments_from  # noqa: E402
from .spline import evaluate  # noqa: E402

log = logging.getLogger(__name__)


def _circle(ax, c, r, **kw):
    ang = np.linspace(0, 2 * np.pi, 64)
    ax.plot(c[0] + r * np.cos(ang), c[1] + r * np.sin(ang), **kw)


def _features(items):
    return {int(f["circle"]): (np.array(f["center"]), float(f["radius"])) for f in items}


def frame_image(path, frame, stream, k, segment, spec, width, height):
    """Accumulated events of one window with detected, rectified and
    reprojected circles."""
    a, b = frame["event_range"]
    if not (0 <= a < b <= len(stream)):
        raise IndexError(f"event range {a}:{b} outside the stream")
    ev = stream[a:b]
    fig, ax = plt.subplots(figsize=(width / 60.0, height / 60.0), dpi=100)
    pos = ev.p > 0
    ax.scatter(ev.x[pos], ev.y[pos], s=1, c="tab:red", lw=0, label="positive")
    ax.scatter(ev.x[~pos], ev.y[~pos], s=1, c="tab:blue", lw=0, label="negative")
    det = _features(frame["detected"])
    rect = _features(frame["rectified"])
    for s, (c, r) in det.items():
        ax.plot(*c, "x", color="0.3", ms=4)
        if s not in rect:
            _circle(ax, c, r, color="orange", lw=1.0)
    for c, r in rect.values():
        _circle(ax, c, r, color="tab:green", lw=1.0)
    t = frame["t_ref_us"] * 1e-6
    if segment is not None and segment.contains(t):
        p, q = evaluate(segment, t)
        centers, radii = projected_circles(k, quat_to_rot(q), p, spec)
        for c, r in zip(centers, radii):
            if np.isfinite(r):
                _circle(ax, c, r, color="k", lw=0.6, ls="--")
    ax.set_xlim(0, width - 1)
    ax.set_ylim(height - 1, 0)
    ax.set_aspect("equal")
    ax.set_title(f"t = {t:.4f} s: {len(det)} detected, {len(rect)} kept "
                 "(orange: rejected, dashed: refined reprojection)", fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def residual_histogram(path, data):
    h = data["solver"]["residual_histogram"]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    if h["counts"]:
        edges = np.array(h["edges_m"]) * 1e3
        ax.stairs(h["counts"], edges, fill=True, color="tab:blue")
    ax.set_xlabel("signed circle distance [mm]")
    ax.set_ylabel("events")
    ax.set_title(f"final residuals, rms {data['solver']['final']['rms_m'] * 1e3:.3f} mm")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def undistorted_grid(path, data, spec):
    """Rectified feature centres of the best-covered frame before and after
    removing the radial distortion."""
    frames = [f for f in data["frames"] if f["rectified"]]
    fig, ax = plt.subplots(figsize=(6, 4.5), dpi=100)
    if frames:
        k = intrinsics_from(data)
        f = max(frames, key=lambda fr: len(fr["rectified"]))
        feats = _features(f["rectified"])
        idx = np.array(sorted(feats))
        m = np.array([feats[s][0] for s in idx])
        n = normalize(k, m)
        u = np.column_stack([k.fx * n[:, 0] + k.cx, k.fy * n[:, 1] + k.cy])
        for pts, style, label in ((m, "o", "observed"), (u, "s", "undistorted")):
            ax.plot(pts[:, 0], pts[:, 1], style, ms=3, label=label)
            rows = idx // spec.cols
            for r in np.unique(rows):
                sel = rows == r
                if sel.sum() > 1:
                    ax.plot(pts[sel, 0], pts[sel, 1], "-", lw=0.5, color="0.5")
        ax.invert_yaxis()
        ax.set_aspect("equal")
        ax.legend(fontsize=7)
        ax.set_title(f"feature grid at t = {f['t_ref_us'] * 1e-6:.3f} s")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def summary(path_png, path_txt, data):
    k = data["intrinsics"]
    k0 = data["initial_intrinsics"]
    lines = [
        f"evcal {data['tool']['version']} result",
        f"converged: {data['converged']} ({data['termination']}, {data['iterations']} iterations)",
        "intrinsics:      fx={fx:.4f} fy={fy:.4f} cx={cx:.4f} cy={cy:.4f}".format(**k),
        "                 dist=" + ", ".join(f"{d:.5g}" for d in k["dist"]),
        "initialization:  fx={fx:.4f} fy={fy:.4f} cx={cx:.4f} cy={cy:.4f}".format(**k0),
        f"frames: {len(data['frames'])}, segments: {len(data['segments'])}",
        f"correspondences: {data['correspondences']['initial']} initial, "
        f"{data['correspondences']['augmented']} after augmentation",
        f"residual rms: {data['solver']['initial']['rms_m'] * 1e3:.4f} mm -> "
        f"{data['solver']['final']['rms_m'] * 1e3:.4f} mm",
    ]
    with open(path_txt, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4), dpi=100)
    ax0.axis("off")
    ax0.text(0.0, 1.0, "\n".join(lines), va="top", family="monospace", fontsize=7)
    hist = data["solver"]["cost_history"]
    ax1.semilogy(np.arange(len(hist)), hist, "o-", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("robust cost")
    fig.tight_layout()
    fig.savefig(path_png)
    plt.close(fig)


def write_report(data, stream, out_dir):
    """Write one PNG per reference frame plus summary images; returns the
    written paths. Frames whose events are unavailable are skipped."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = CalibrationConfig.from_dict(data.get("config") or {})
    spec = cfg.pattern.spec()
    width, height = cfg.sensor.width, cfg.sensor.height
    k = intrinsics_from(data)
    segments = segments_from(data)
    written = []
    for i, f in enumerate(data["frames"]):
        path = os.path.join(out_dir, f"frame_{i:04d}.png")
        seg = segments[f["segment"]] if 0 <= f["segment"] < len(segments) else None
        try:
            frame_image(path, f, stream, k, seg, spec, width, height)
        except (IndexError, ValueError) as exc:
            log.warning("skipping frame %d: %s", i, exc)
            continue
        written.append(path)
    extras = (("residual_histogram.png", lambda p: residual_histogram(p, data)),
              ("undistorted_grid.png", lambda p: undistorted_grid(p, data, spec)))
    for name, fn in extras if data["frames"] else ():
        path = os.path.join(out_dir, name)
        fn(path)
        written.append(path)
    png, txt = os.path.join(out_dir, "summary.png"), os.path.join(out_dir, "summary.txt")
    summary(png, txt, data)
    written += [png, txt]
    return written
