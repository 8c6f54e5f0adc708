"""Localization microscopy harness: simulate, localize, evaluate, render.

Frames are coarse camera images of point emitters; localization solves the
sparse recovery problem on a ``zoom`` times finer grid and reports one
molecule per surviving fine pixel, at that pixel's center.  Evaluation
matches estimated against true molecules within a tolerance radius and
reports the Jaccard index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .operators import SmlmOperator
from .reformulation import Constrained, PenaltyMode, ProblemInstance
from .solvers import SolveConfig, SolveTrace, biconvex_minimize, iht_constrained, iht_penalized


class FileFormatError(ValueError):
    """A data file failed to parse; the message carries the line number."""


@dataclass(frozen=True)
class Molecule:
    x_nm: float
    y_nm: float
    intensity: float


@dataclass(frozen=True)
class JaccardReport:
    tolerance_nm: float
    cr: int  # correctly reconstructed (matched) molecules
    fp: int  # unmatched estimates
    fn: int  # unmatched ground truth
    jaccard: float


@dataclass(frozen=True)
class FrameStack:
    """Stack of coarse frames plus the acquisition geometry."""

    frames: np.ndarray  # (count, size, size)
    pixel_nm: float
    fwhm_nm: float
    zoom: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 3 or frames.shape[1] != frames.shape[2]:
            raise ValueError("frames must be (count, size, size)")
        if self.pixel_nm <= 0:
            raise ValueError("pixel_nm must be > 0")
        object.__setattr__(self, "frames", frames)

    @property
    def size(self) -> int:
        return self.frames.shape[1]

    def save(self, stack_path, sidecar_path) -> None:
        """Raw little-endian float32, frame-major, plus a JSON sidecar."""
        with open(stack_path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.frames, dtype="<f4").tobytes())
        meta = {
            "frames": int(self.frames.shape[0]),
            "size": int(self.size),
            "pixel_nm": float(self.pixel_nm),
            "fwhm_nm": float(self.fwhm_nm),
            "zoom": int(self.zoom),
        }
        with open(sidecar_path, "w", encoding="ascii", newline="\n") as fh:
            json.dump(meta, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, stack_path, sidecar_path) -> "FrameStack":
        try:
            with open(sidecar_path, "r", encoding="ascii") as fh:
                meta = json.load(fh)
            count, size = int(meta["frames"]), int(meta["size"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FileFormatError(f"{sidecar_path}: bad sidecar ({exc})") from exc
        raw = np.fromfile(stack_path, dtype="<f4")
        if raw.size != count * size * size:
            raise FileFormatError(
                f"{stack_path}: holds {raw.size} floats, sidecar promises {count * size * size}"
            )
        return cls(
            raw.astype(float).reshape(count, size, size),
            pixel_nm=float(meta["pixel_nm"]),
            fwhm_nm=float(meta["fwhm_nm"]),
            zoom=int(meta["zoom"]),
        )


def place_molecules(op: SmlmOperator, molecules) -> np.ndarray:
    """Fine-grid impulse image: each molecule drops its intensity into the
    fine pixel containing its position."""
    extent = op.coarse_size * op.pixel_nm
    img = np.zeros((op.fine_size, op.fine_size))
    for m in molecules:
        if not (0.0 <= m.x_nm < extent and 0.0 <= m.y_nm < extent):
            raise ValueError(f"molecule at ({m.x_nm}, {m.y_nm}) nm outside [0, {extent}) nm")
        if m.intensity < 0:
            raise ValueError("molecule intensity must be >= 0")
        row = int(m.y_nm / op.fine_pixel_nm)
        col = int(m.x_nm / op.fine_pixel_nm)
        img[row, col] += m.intensity
    return img


def simulate_stack(ground_truth, op: SmlmOperator, noise_sigma: float, seed: int) -> FrameStack:
    """Render each molecule list through the acquisition model plus white noise.

    Args:
        ground_truth: one molecule list per frame.
        op: acquisition operator (defines geometry and blur).
        noise_sigma: standard deviation of the additive Gaussian noise.
        seed: RNG seed; identical seeds give bit-identical stacks.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    frames = np.empty((len(ground_truth), op.coarse_size, op.coarse_size))
    for f, molecules in enumerate(ground_truth):
        clean = op.apply_image(place_molecules(op, molecules))
        if noise_sigma > 0:
            clean = clean + rng.normal(0.0, noise_sigma, clean.shape)
        frames[f] = clean
    return FrameStack(frames, pixel_nm=op.pixel_nm, fwhm_nm=op.fwhm_nm, zoom=op.zoom)


def random_molecules(
    op: SmlmOperator,
    count: int,
    rng: np.random.Generator,
    min_separation_nm: float = 0.0,
    intensity_range: tuple[float, float] = (800.0, 1200.0),
    margin_nm: float | None = None,
    snap_to_fine: bool = False,
) -> list[Molecule]:
    """Draw molecule positions uniformly, enforcing a pairwise separation.

    Rejection sampling; raises if the field cannot host ``count`` molecules
    at the requested separation.  ``snap_to_fine`` moves each molecule to
    the center of its fine pixel, which makes noiseless recovery exact.
    """
    extent = op.coarse_size * op.pixel_nm
    margin = 2.0 * op.sigma_nm if margin_nm is None else margin_nm
    lo, hi = margin, extent - margin
    if hi <= lo:
        raise ValueError("margin leaves no room for molecules")

    placed: list[tuple[float, float]] = []
    for _ in range(200):  # full restarts when sampling corners itself
        placed = []
        while len(placed) < count:
            for _ in range(2000):
                x, y = rng.uniform(lo, hi, size=2)
                if snap_to_fine:
                    x = (int(x / op.fine_pixel_nm) + 0.5) * op.fine_pixel_nm
                    y = (int(y / op.fine_pixel_nm) + 0.5) * op.fine_pixel_nm
                if all((x - px) ** 2 + (y - py) ** 2 >= min_separation_nm**2 for px, py in placed):
                    placed.append((x, y))
                    break
            else:
                break
        if len(placed) == count:
            a, b = intensity_range
            return [Molecule(x, y, float(rng.uniform(a, b))) for x, y in placed]
    raise ValueError("could not place molecules at the requested separation")


@dataclass(frozen=True)
class FrameLocalization:
    molecules: list[Molecule]
    converged: bool
    trace: SolveTrace | None  # continuation trace; None for the IHT baselines


def localize_frame(
    frame: np.ndarray,
    op: SmlmOperator,
    mode: PenaltyMode,
    cfg: SolveConfig | None = None,
    algo: str = "biconvex",
) -> FrameLocalization:
    """Recover the fine-grid emitters of one coarse frame.

    Every fine pixel whose recovered intensity exceeds the zero tolerance
    becomes a molecule at that pixel's center.  In constrained mode the
    output never exceeds k molecules (the brightest are kept in the
    degenerate case of an unconverged solve reporting more).
    """
    cfg = cfg or SolveConfig()
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (op.coarse_size, op.coarse_size):
        raise ValueError(f"frame shape {frame.shape} does not match operator {op.coarse_size}")
    inst = ProblemInstance(op, frame.ravel(), mode)

    trace = None
    if algo == "biconvex":
        sol = biconvex_minimize(inst, cfg)
        x, converged, trace = sol.pair.x, sol.trace.converged, sol.trace
    elif algo == "iht":
        if isinstance(mode, Constrained):
            res = iht_constrained(inst, mode.k, cfg)
        else:
            res = iht_penalized(inst, mode.lam, cfg)
        x, converged = res.x, res.converged
    else:
        raise ValueError(f"unknown algo {algo!r}; expected 'biconvex' or 'iht'")

    idx = np.flatnonzero(x > cfg.zero_tol)
    if isinstance(mode, Constrained) and idx.size > mode.k:
        order = np.argsort(-x[idx], kind="stable")
        idx = idx[order[: mode.k]]
        idx.sort()
    rows, cols = np.divmod(idx, op.fine_size)
    molecules = [
        Molecule((c + 0.5) * op.fine_pixel_nm, (r + 0.5) * op.fine_pixel_nm, float(x[i]))
        for r, c, i in zip(rows, cols, idx)
    ]
    return FrameLocalization(molecules, converged, trace)


def jaccard(est, gt, tolerance_nm: float) -> JaccardReport:
    """Greedy one-to-one matching by ascending distance within the tolerance.

    Matched pairs count as correct; leftover estimates are false positives
    and leftover truths false negatives.  Two empty lists score 1.
    """
    if tolerance_nm < 0:
        raise ValueError("tolerance_nm must be >= 0")
    est, gt = list(est), list(gt)
    if not est and not gt:
        return JaccardReport(tolerance_nm, 0, 0, 0, 1.0)
    cr = 0
    if est and gt:
        e = np.array([[m.x_nm, m.y_nm] for m in est])
        g = np.array([[m.x_nm, m.y_nm] for m in gt])
        dist = np.sqrt(((e[:, None, :] - g[None, :, :]) ** 2).sum(axis=2))
        ei, gi = np.nonzero(dist <= tolerance_nm)
        order = np.lexsort((gi, ei, dist[ei, gi]))
        est_used = np.zeros(len(est), dtype=bool)
        gt_used = np.zeros(len(gt), dtype=bool)
        for t in order:
            i, j = ei[t], gi[t]
            if not est_used[i] and not gt_used[j]:
                est_used[i] = gt_used[j] = True
                cr += 1
    fp = len(est) - cr
    fn = len(gt) - cr
    return JaccardReport(tolerance_nm, cr, fp, fn, cr / (cr + fp + fn))


def render_superres(molecule_lists, fine_size: int, pixel_nm: float) -> np.ndarray:
    """Accumulate intensities into fine bins and min-max normalize to [0, 1].

    A flat accumulation (including all-empty input) renders as all zeros.
    Molecules falling outside the canvas are ignored.
    """
    if fine_size < 1:
        raise ValueError("fine_size must be >= 1")
    img = np.zeros((fine_size, fine_size))
    for molecules in molecule_lists:
        for m in molecules:
            col = int(m.x_nm / pixel_nm)
            row = int(m.y_nm / pixel_nm)
            if 0 <= row < fine_size and 0 <= col < fine_size and m.x_nm >= 0 and m.y_nm >= 0:
                img[row, col] += m.intensity
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


MOLECULE_CSV_HEADER = "frame,x_nm,y_nm,intensity"


def write_molecule_csv(path, per_frame) -> None:
    """Write one molecule per row, ``frame,x_nm,y_nm,intensity``."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(MOLECULE_CSV_HEADER + "\n")
        for frame, molecules in enumerate(per_frame):
            for m in molecules:
                fh.write(f"{frame},{float(m.x_nm)!r},{float(m.y_nm)!r},{float(m.intensity)!r}\n")


def read_molecule_csv(path) -> dict[int, list[Molecule]]:
    """Parse a molecule CSV back into per-frame lists, keyed by frame index."""
    frames: dict[int, list[Molecule]] = {}
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}:1: empty file, expected header") from None
        if [h.strip() for h in header] != MOLECULE_CSV_HEADER.split(","):
            raise FileFormatError(f"{path}:1: expected header {MOLECULE_CSV_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                frame = int(row[0])
                x, y, inten = float(row[1]), float(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise FileFormatError(f"{path}:{lineno}: expected frame,x_nm,y_nm,intensity") from None
            frames.setdefault(frame, []).append(Molecule(x, y, inten))
    return frames


def write_pgm16(path, image: np.ndarray) -> None:
    """16-bit binary PGM; values are expected in [0, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("image must be 2-D")
    scaled = np.clip(np.rint(image * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())
