"""Certified authentication and refuse radii, fake keys and refuse balls."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from authnet.certify.bounds import BOUNDS
from authnet.nncore import SequentialModel, forward
from authnet.pipeline import AuthKey, apply_key, mask_bounds

AUTH = "authentication"
REFUSE = "refuse"


@dataclass
class RadiusResult:
    radius: float
    kind: str
    iterations: int
    bracket: float
    valid: bool = True  # False when the centre is misclassified (auth) / capped at eps_hi


def _margin(model, x0, y_c, eps, method):
    b = BOUNDS[method](model, x0, eps)
    others = np.delete(b.upper, y_c)
    return b.lower[y_c] - others.max()


def _predict_one(model, x0):
    return int(np.argmax(forward(model, x0[None])[0]))


def auth_radius(model: SequentialModel, keyed_x0: np.ndarray, y_c: int, eps_hi: float = 0.5,
                tol: float = 1e-5, max_iter: int = 40, method: str = "crown") -> RadiusResult:
    """Largest eps whose certified margin L_yc - max_{i!=yc} U_i stays >= 0."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if _predict_one(model, keyed_x0) != y_c:
        return RadiusResult(0.0, AUTH, 0, 0.0, valid=False)
    lo, hi, it = 0.0, eps_hi, 0
    if _margin(model, keyed_x0, y_c, hi, method) >= 0:
        return RadiusResult(hi, AUTH, 1, 0.0, valid=False)
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        if _margin(model, keyed_x0, y_c, mid, method) >= 0:
            lo = mid
        else:
            hi = mid
        it += 1
    return RadiusResult(lo, AUTH, it, hi - lo)


def refuse_radius(model: SequentialModel, x_fk: np.ndarray, y_p: int, y_c: int, eps_hi: float = 0.5,
                  tol: float = 1e-5, max_iter: int = 40, method: str = "crown") -> RadiusResult:
    """Smallest eps at which U_yc reaches L_yp (the true class can catch up)."""
    if y_p == y_c:
        raise ValueError("prediction equals ground truth; not a refuse sample")

    def crossed(eps):
        b = BOUNDS[method](model, x_fk, eps)
        return b.upper[y_c] >= b.lower[y_p]

    lo, hi, it = 0.0, eps_hi, 0
    if crossed(0.0):
        raise ValueError(f"model does not prefer class {y_p} over {y_c} at the sample")
    if not crossed(hi):
        return RadiusResult(hi, REFUSE, 1, 0.0, valid=False)
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        if crossed(mid):
            hi = mid
        else:
            lo = mid
        it += 1
    return RadiusResult(hi, REFUSE, it, hi - lo)


@dataclass
class FakeKeySet:
    keys: list[AuthKey]
    seed: int


def gen_fake_keys(r: int, key_shape, eps_m: float = 0.5, eps_u: float = 0.5, seed: int = 0,
                  mask_mode: str = "deviation") -> FakeKeySet:
    """Monte-Carlo keys drawn uniformly from the same boxes as real keys."""
    if r < 1:
        raise ValueError("need at least one fake key")
    c, h, w = key_shape
    rng = np.random.default_rng(seed)
    lo, hi = mask_bounds(eps_m, mask_mode)
    keys = []
    for _ in range(r):
        mask = rng.uniform(lo, hi, size=(h, w))
        offset = rng.uniform(-eps_u, eps_u, size=(c, h, w))
        keys.append(AuthKey(mask, offset, eps_m, eps_u, mask_mode=mask_mode))
    return FakeKeySet(keys, seed)


def sample_ball(center: np.ndarray, eps: float, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniform in the L-inf ball around ``center``, clamped to [0, 1]."""
    if eps < 0 or n < 1:
        raise ValueError("need eps >= 0 and n >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-eps, eps, size=(n,) + np.shape(center))
    return np.clip(np.asarray(center)[None] + noise, 0.0, 1.0)


@dataclass
class RefuseProfile:
    per_ball: np.ndarray  # accuracy per ball id
    overall: float
    max_ball: float
    correct: np.ndarray


def refuse_accuracy_profile(model: SequentialModel, points: np.ndarray, labels: np.ndarray,
                            ball_ids: np.ndarray | None = None, batch_size: int = 1000) -> RefuseProfile:
    if len(points) == 0:
        raise ValueError("empty sample set")
    preds = np.concatenate([np.argmax(forward(model, points[i:i + batch_size]), 1)
                            for i in range(0, len(points), batch_size)])
    correct = preds == np.asarray(labels)
    ball_ids = np.zeros(len(points), dtype=int) if ball_ids is None else np.asarray(ball_ids)
    uniq, inv = np.unique(ball_ids, return_inverse=True)
    per_ball = np.bincount(inv, weights=correct) / np.bincount(inv)
    return RefuseProfile(per_ball, float(correct.mean()), float(per_ball.max()), correct)


@dataclass
class RefuseDomain:
    centers: np.ndarray
    center_labels: np.ndarray
    center_preds: np.ndarray
    center_key: np.ndarray
    radii: list[RadiusResult]
    points: np.ndarray
    point_labels: np.ndarray
    point_ball: np.ndarray
    profile: RefuseProfile | None = None
    ball_center: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def center_accuracy(self) -> float:
        return float(np.mean(self.center_preds == self.center_labels))


def refuse_domain(model: SequentialModel, images: np.ndarray, labels: np.ndarray, n_keys: int = 20,
                  n_points: int = 100, eps_m: float = 0.5, eps_u: float = 0.5, seed: int = 0,
                  eps_hi: float = 0.5, tol: float = 1e-5, method: str = "crown") -> RefuseDomain:
    """Sign every image with every fake key; grow a refuse ball around each misclassified one."""
    fakes = gen_fake_keys(n_keys, images.shape[1:], eps_m, eps_u, seed)
    centers, c_labels, c_key = [], [], []
    for ki, key in enumerate(fakes.keys):
        centers.append(apply_key(images, key))
        c_labels.append(labels)
        c_key.append(np.full(len(images), ki))
    centers = np.concatenate(centers)
    c_labels = np.concatenate(c_labels)
    c_key = np.concatenate(c_key)
    preds = np.argmax(forward(model, centers), axis=1)
    radii, pts, pt_labels, pt_ball, ball_center = [], [], [], [], []
    for i in np.flatnonzero(preds != c_labels):
        res = refuse_radius(model, centers[i], int(preds[i]), int(c_labels[i]), eps_hi, tol, method=method)
        ball = len(radii)
        radii.append(res)
        ball_center.append(i)
        pts.append(sample_ball(centers[i], res.radius, n_points, seed=seed * 100003 + int(i)))
        pt_labels.append(np.full(n_points, c_labels[i]))
        pt_ball.append(np.full(n_points, ball))
    shape = (0,) + images.shape[1:]
    dom = RefuseDomain(
        centers, c_labels, preds, c_key, radii,
        np.concatenate(pts) if pts else np.zeros(shape),
        np.concatenate(pt_labels) if pt_labels else np.zeros(0, dtype=int),
        np.concatenate(pt_ball) if pt_ball else np.zeros(0, dtype=int),
        ball_center=np.asarray(ball_center, dtype=int),
    )
    if len(dom.points):
        dom.profile = refuse_accuracy_profile(model, dom.points, dom.point_labels, dom.point_ball)
    return dom


def mean_auth_radius(model: SequentialModel, images: np.ndarray, labels: np.ndarray,
                     key: AuthKey | None = None, **kw) -> tuple[float, list[RadiusResult]]:
    """Arithmetic mean of eps_m over (optionally keyed) samples."""
    xs = apply_key(images, key) if key is not None else images
    results = [auth_radius(model, x, int(y), **kw) for x, y in zip(xs, labels)]
    return float(np.mean([r.radius for r in results])), results
