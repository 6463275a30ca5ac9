"""Randomized-smoothing certification with an incremental fast path.

Certification of an input draws Gaussian-perturbed samples in two phases
(class selection, then Clopper-Pearson estimation of the top-class lower
bound p_A); the certified l2 radius is sigma * Phi^-1(p_A), or ABSTAIN when
p_A <= 1/2.  Every input owns RNG substreams keyed by (run seed, input id,
phase), so results are bit-identical no matter how many worker threads run.

The incremental path re-certifies a modified (quantized) classifier without
touching the original: the full certification stores the original model's
predictions on a dedicated noise stream, and the incremental pass replays
that stream through the new model, upper-bounds the disagreement probability
zeta, and certifies the cached class at p_A - zeta.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .stats import binom_lower_bound, binom_upper_bound, inv_norm_cdf

SAMPLE_BATCH = 512
RADIUS_GRID = tuple(0.25 * i for i in range(8))  # 0.0 .. 1.75

_CACHE_MAGIC = b"ARQCACHE"
_CACHE_VERSION = 1


class CacheMissError(KeyError):
    """Incremental certification asked for an input the cache does not hold."""


@dataclass
class CertificationRecord:
    input_id: int
    label: int
    predicted: int
    p_lower: float
    radius: float
    abstain: bool
    n_used: int
    sigma: float
    alpha: float

    @property
    def correct(self) -> bool:
        return not self.abstain and self.predicted == self.label

    @property
    def counted_radius(self) -> float:
        """Contribution to the ACR: the radius if certified correct, else 0."""
        return self.radius if self.correct else 0.0


@dataclass
class ACRReport:
    acr: float
    records: list
    certified_accuracy_curve: list  # (radius, accuracy) on RADIUS_GRID

    @property
    def clean_accuracy(self) -> float:
        return self.certified_accuracy_curve[0][1]


@dataclass
class CacheEntry:
    predicted: int
    p_lower: float
    n_used: int
    trace: np.ndarray  # original model's predictions on the disagreement stream


@dataclass
class CertCache:
    sigma: float
    alpha: float
    seed: int
    n0: int
    trace_n: int
    entries: dict = field(default_factory=dict)  # input_id -> CacheEntry


def certified_accuracy(records: list, r: float) -> float:
    """Fraction of inputs certified correct at radius strictly above r
    (>= r at r = 0, so the r = 0 value is the clean accuracy)."""
    if r < 0:
        raise ValueError("radius threshold must be nonnegative")
    if not records:
        return 0.0
    hits = sum(1 for rec in records
               if rec.correct and (rec.radius >= r if r == 0 else rec.radius > r))
    return hits / len(records)


def make_report(records: list) -> ACRReport:
    acr = sum(rec.counted_radius for rec in records) / len(records) if records else 0.0
    curve = [(r, certified_accuracy(records, r)) for r in RADIUS_GRID]
    return ACRReport(acr, list(records), curve)


# ---------------------------------------------------------------------------
# sampling


def _sample_predictions(classifier, x, sigma, n, rng) -> np.ndarray:
    """n predictions of classifier(x + sigma * eps); fixed 512-sample batching
    so any prefix of the stream is reproducible independent of n."""
    x = np.asarray(x)
    preds = np.empty(n, dtype=np.int32)
    done = 0
    while done < n:
        b = min(SAMPLE_BATCH, n - done)
        batch = np.broadcast_to(x, (b,) + x.shape)
        if sigma > 0:
            batch = batch + sigma * rng.standard_normal((b,) + x.shape)
        preds[done:done + b] = classifier(batch)
        done += b
    return preds


def sample_counts(classifier, x, sigma: float, n: int, rng,
                  num_classes: int, return_preds: bool = False):
    """Per-class counts of the classifier's predictions under Gaussian noise."""
    if n < 1:
        raise ValueError("need at least one sample")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        pred = int(classifier(np.asarray(x)[None])[0])
        counts = np.zeros(num_classes, dtype=np.int64)
        counts[pred] = n
        preds = np.full(n, pred, dtype=np.int32)
    else:
        preds = _sample_predictions(classifier, x, sigma, n, rng)
        counts = np.bincount(preds, minlength=num_classes).astype(np.int64)
    return (counts, preds) if return_preds else counts


def _input_streams(seed: int, input_id: int):
    """(select, estimate, disagree, extra) generators for one input."""
    root = np.random.SeedSequence([int(seed), int(input_id)])
    return [np.random.default_rng(ss) for ss in root.spawn(4)]


def default_selection_count(n: int) -> int:
    return max(32, n // 10)


def certify_input(classifier, x, sigma: float, n_sel: int, n: int, alpha: float,
                  rng, num_classes: int, label: int = -1,
                  input_id: int = 0) -> CertificationRecord:
    """Two-phase certification of one input.

    ``rng`` is a Generator owning this input's randomness; selection and
    estimation use spawned substreams.  The top class is chosen with n_sel
    samples, p_A is the one-sided Clopper-Pearson lower bound from n fresh
    samples, and the radius is sigma * Phi^-1(p_A) when p_A > 1/2, else the
    record abstains.
    """
    if n_sel < 1 or n < 1:
        raise ValueError("sample counts must be positive")
    sel_rng, est_rng = rng.spawn(2)
    counts = sample_counts(classifier, x, sigma, n_sel, sel_rng, num_classes)
    c_hat = int(np.argmax(counts))
    counts = sample_counts(classifier, x, sigma, n, est_rng, num_classes)
    p_lower = binom_lower_bound(int(counts[c_hat]), n, alpha)
    if p_lower > 0.5:
        return CertificationRecord(input_id, label, c_hat, p_lower,
                                   sigma * inv_norm_cdf(p_lower), False,
                                   n, sigma, alpha)
    return CertificationRecord(input_id, label, c_hat, p_lower, 0.0, True,
                               n, sigma, alpha)


def _certify_one(classifier, x, label, sigma, n_sel, n0, alpha,
                 seed, input_id, num_classes, trace_n):
    sel_rng, est_rng, dis_rng, _ = _input_streams(seed, input_id)
    counts = sample_counts(classifier, x, sigma, n_sel, sel_rng, num_classes)
    c_hat = int(np.argmax(counts))
    counts = sample_counts(classifier, x, sigma, n0, est_rng, num_classes)
    p_lower = binom_lower_bound(int(counts[c_hat]), n0, alpha)
    if p_lower > 0.5:
        record = CertificationRecord(input_id, label, c_hat, p_lower,
                                     sigma * inv_norm_cdf(p_lower), False,
                                     n0, sigma, alpha)
    else:
        record = CertificationRecord(input_id, label, c_hat, p_lower, 0.0, True,
                                     n0, sigma, alpha)
    trace = (_sample_predictions(classifier, x, sigma, trace_n, dis_rng)
             if trace_n > 0 else np.empty(0, dtype=np.int32))
    return record, CacheEntry(c_hat, p_lower, n0, trace)


def certify_dataset(classifier, X, labels, sigma: float, n0: int, alpha: float,
                    seed: int, num_classes: int, n_sel: int | None = None,
                    trace_n: int = 0, threads: int = 1, input_ids=None):
    """Certify every input; returns (ACRReport, CertCache).

    ``trace_n`` > 0 additionally stores the classifier's predictions on each
    input's disagreement noise stream so a modified classifier can later be
    certified incrementally without re-running this one.
    """
    if len(X) == 0:
        raise ValueError("empty certification set")
    if n_sel is None:
        n_sel = default_selection_count(n0)
    if input_ids is None:
        input_ids = list(range(len(X)))

    def job(i):
        return _certify_one(classifier, X[i], int(labels[i]), sigma, n_sel, n0,
                            alpha, seed, int(input_ids[i]), num_classes, trace_n)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(len(X))))
    else:
        results = [job(i) for i in range(len(X))]
    records = [r for r, _ in results]
    cache = CertCache(sigma, alpha, seed, n0, trace_n)
    for (record, entry), input_id in zip(results, input_ids):
        cache.entries[int(input_id)] = entry
    return make_report(records), cache


def _incremental_one(q_classifier, cache: CertCache, x, label, input_id,
                     n, alpha_zeta, num_classes, fallback):
    entry = cache.entries.get(int(input_id))
    if entry is None:
        raise CacheMissError(f"no cached certification for input {input_id}")
    if n > cache.trace_n:
        raise ValueError(
            f"incremental certification needs n <= trace_n "
            f"({n} > {cache.trace_n}) for input {input_id}")
    _, _, dis_rng, extra_rng = _input_streams(cache.seed, input_id)
    q_preds = _sample_predictions(q_classifier, x, cache.sigma, n, dis_rng)
    disagreements = int(np.sum(q_preds != entry.trace[:n]))
    zeta = binom_upper_bound(disagreements, n, alpha_zeta)
    p = entry.p_lower - zeta
    if p > 0.5:
        return CertificationRecord(input_id, label, entry.predicted, p,
                                   cache.sigma * inv_norm_cdf(p), False,
                                   n, cache.sigma, alpha_zeta)
    if fallback:
        return certify_input(q_classifier, x, cache.sigma,
                             default_selection_count(n), n, cache.alpha,
                             extra_rng, num_classes, label, input_id)
    return CertificationRecord(input_id, label, entry.predicted, p, 0.0, True,
                               n, cache.sigma, alpha_zeta)


def incremental_certify(q_classifier, cache: CertCache, X, labels, sigma: float,
                        n: int, alpha_zeta: float, num_classes: int,
                        threads: int = 1, input_ids=None,
                        fallback: bool = False) -> ACRReport:
    """Certify a modified classifier by replaying each input's cached
    disagreement stream: zeta upper-bounds P[f != f_q] under shared noise and
    the cached class is certified at p_A - zeta.  ``fallback`` re-runs fresh
    two-phase certification (on the modified classifier) for abstained inputs
    instead of reporting the abstain."""
    if sigma != cache.sigma:
        raise ValueError(f"cache was built at sigma={cache.sigma}, got {sigma}")
    if input_ids is None:
        input_ids = list(range(len(X)))

    def job(i):
        return _incremental_one(q_classifier, cache, X[i], int(labels[i]),
                                int(input_ids[i]), n, alpha_zeta, num_classes,
                                fallback)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(job, range(len(X))))
    else:
        records = [job(i) for i in range(len(X))]
    return make_report(records)


# ---------------------------------------------------------------------------
# persistence

RECORDS_CSV_HEADER = "input_id,label,predicted,p_lower,radius,abstain,correct,n,sigma,alpha"


def records_to_csv(records: list) -> str:
    lines = [RECORDS_CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.input_id},{r.label},{r.predicted},{r.p_lower!r},{r.radius!r},"
            f"{int(r.abstain)},{int(r.correct)},{r.n_used},{r.sigma!r},{r.alpha!r}")
    return "\n".join(lines) + "\n"


def records_from_csv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != RECORDS_CSV_HEADER:
        raise ValueError("not a certification records CSV")
    records = []
    for ln in lines[1:]:
        (input_id, label, predicted, p_lower, radius,
         abstain, _correct, n, sigma, alpha) = ln.split(",")
        records.append(CertificationRecord(
            int(input_id), int(label), int(predicted), float(p_lower),
            float(radius), bool(int(abstain)), int(n), float(sigma), float(alpha)))
    return records


def save_cache(cache: CertCache, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<IddqII", _CACHE_VERSION, cache.sigma, cache.alpha,
                             cache.seed, cache.n0, cache.trace_n))
        fh.write(struct.pack("<I", len(cache.entries)))
        for input_id in sorted(cache.entries):
            e = cache.entries[input_id]
            fh.write(struct.pack("<IidI", input_id, e.predicted, e.p_lower, e.n_used))
            fh.write(np.asarray(e.trace, dtype="<i4").tobytes())


def load_cache(path) -> CertCache:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CACHE_MAGIC:
        raise ValueError("not an ARQCACHE file (bad magic)")
    off = 8
    try:
        version, sigma, alpha, seed, n0, trace_n = struct.unpack_from("<IddqII", blob, off)
        off += struct.calcsize("<IddqII")
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported ARQCACHE version {version}")
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        cache = CertCache(sigma, alpha, seed, n0, trace_n)
        for _ in range(count):
            input_id, predicted, p_lower, n_used = struct.unpack_from("<IidI", blob, off)
            off += struct.calcsize("<IidI")
            trace = np.frombuffer(blob, dtype="<i4", count=trace_n, offset=off).copy()
            off += 4 * trace_n
            cache.entries[input_id] = CacheEntry(predicted, p_lower, n_used, trace)
    except struct.error as exc:
        raise ValueError(f"truncated ARQCACHE file: {exc}") from None
    return cache
