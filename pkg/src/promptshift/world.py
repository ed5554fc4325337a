"""The synthetic embedding/latent universe and its dataset machinery.

Token geometry. A seeded vocabulary of benign unit vectors keeps every token
nearly orthogonal to the unsafe direction u. Position 0 holds a style token
whose sign against a fixed style direction alternates deterministically
across pairs (value-readable, so the permutation-blind fusion can find it).
Position 1 is the subject slot. An unsafe prompt copy replaces one to three
base tokens (never slots 0-1) with normalize(v + beta * u_eff), where v is
the base token being replaced and u_eff is u itself for plain pairs or u
rotated by a small angle for paraphrase-drift pairs. A fraction of pairs
carry a decoy subject: a token built exactly like a planted one, present
identically in both copies. The world's semantic rule is that slots 0-1
never carry unsafe meaning, so decoy prompts are textually indistinguishable
from unsafe ones to any flavor-based reader, while the pseudo-mask (built
from pair differences) and the position-aware heads are unaffected.

Latent geometry. The clean latent encodes the label twice. A linear pattern
s_lin * U_A is readable by a per-step linear probe and fades with the
schedule. A much stronger carrier rides along U_B with sign
(2*label - 1) * style, where style is the sign of the prompt's first token
against a fixed style direction: the carrier is present with the same energy
for both labels and its sign is the XOR of the label with a text-only bit,
so neither the latent alone (style unknown) nor the text alone (latent sign
unknown) can decode it, while the fused model reads it through the bilinear
attention pathway. Diffusion mixing z_t = sqrt(ab_t) z_0 +
sqrt(1 - ab_t) noise erases both channels at the noisy end of the schedule.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import WorldConfig, BETA_LOWER_BOUND, _dataclass_from_dict
from .errors import ConfigError, DimensionError, FormatError
from .redirection import build_pseudo_mask

MAGIC = b"SRD1"
FORMAT_VERSION = 1

VARIANT_PLAIN = 0
VARIANT_PARAPHRASE = 1


def mock_schedule(total_steps: int) -> np.ndarray:
    """Cosine signal-retention schedule: alpha_bar[t] = cos^2(pi/2 * t/T).

    Strictly decreasing from 1 at t=0 to 0 at t=T.
    """
    t = np.arange(total_steps + 1, dtype=np.float64)
    return np.cos(0.5 * np.pi * t / total_steps) ** 2


@dataclass
class DataItem:
    z_t: np.ndarray       # (C, H, W)
    t: int                # step index in 1..T
    label: int            # 0 safe, 1 unsafe
    m_star: np.ndarray    # (L,) binary
    p_emb: np.ndarray     # (L, D)
    emb_safe: np.ndarray  # (L, D)
    emb_unsafe: np.ndarray  # (L, D)
    pair_id: int
    variant: int
    seed_idx: int
    length: int


class SynthDataset:
    """Group-level storage: each group is one (pair, variant, seed, copy) with T steps."""

    def __init__(self, config: WorldConfig, seed: int, arrays: dict[str, np.ndarray]):
        self.config = config
        self.seed = seed
        self.arrays = arrays
        self.n_groups = int(arrays["label"].shape[0])
        self.n_items = self.n_groups * config.total_steps

    def __len__(self) -> int:
        return self.n_items

    # world ground truth
    @property
    def unsafe_direction(self) -> np.ndarray:
        return self.arrays["unsafe_direction"]

    @property
    def style_direction(self) -> np.ndarray:
        return self.arrays["style_direction"]

    @property
    def pattern_linear(self) -> np.ndarray:
        return self.arrays["pattern_linear"]

    @property
    def pattern_carrier(self) -> np.ndarray:
        return self.arrays["pattern_carrier"]

    @property
    def safe_prototype(self) -> np.ndarray:
        return self.arrays["safe_prototype"]

    def group_of(self, i: int) -> tuple[int, int]:
        t = i % self.config.total_steps + 1
        return i // self.config.total_steps, t

    def item(self, i: int) -> DataItem:
        g, t = self.group_of(i)
        a = self.arrays
        length = int(a["length"][g])
        c, h, w = self.config.latent_shape
        label = int(a["label"][g])
        emb_safe = a["emb_safe"][g, :length]
        emb_unsafe = a["emb_unsafe"][g, :length]
        return DataItem(
            z_t=a["z"][g, t - 1].reshape(c, h, w),
            t=t,
            label=label,
            m_star=a["m_star"][g, :length],
            p_emb=emb_unsafe if label == 1 else emb_safe,
            emb_safe=emb_safe,
            emb_unsafe=emb_unsafe,
            pair_id=int(a["pair_id"][g]),
            variant=int(a["variant"][g]),
            seed_idx=int(a["seed_idx"][g]),
            length=length,
        )

    def item_length(self, i: int) -> int:
        return int(self.arrays["length"][i // self.config.total_steps])

    def batch(self, indices: np.ndarray) -> dict[str, np.ndarray]:
        """Stack items of equal prompt length into dense batch arrays."""
        a = self.arrays
        t_steps = self.config.total_steps
        g = np.asarray(indices) // t_steps
        t = np.asarray(indices) % t_steps + 1
        lengths = a["length"][g]
        if lengths.size == 0:
            raise DimensionError("empty batch")
        length = int(lengths[0])
        if np.any(lengths != length):
            raise DimensionError("batch mixes prompt lengths")
        c, h, w = self.config.latent_shape
        labels = a["label"][g].astype(np.int64)
        emb_safe = a["emb_safe"][g, :length]
        emb_unsafe = a["emb_unsafe"][g, :length]
        p_emb = np.where(labels[:, None, None] == 1, emb_unsafe, emb_safe)
        return {
            "z": a["z"][g, t - 1].reshape(-1, c, h, w),
            "t": t.astype(np.int64),
            "label": labels,
            "m_star": a["m_star"][g, :length],
            "p_emb": p_emb,
            "emb_safe": emb_safe,
            "emb_unsafe": emb_unsafe,
            "group": g,
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        _write_stream(self, buf)
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _benign_vector(rng: np.random.Generator, u: np.ndarray, cap: float) -> np.ndarray:
    d = u.shape[0]
    while True:
        v = _unit(rng.standard_normal(d))
        if abs(float(v @ u)) <= cap:
            return v


def _rotate(u: np.ndarray, angle_rad: float, rng: np.random.Generator) -> np.ndarray:
    w = rng.standard_normal(u.shape[0])
    w -= (w @ u) * u
    w = _unit(w)
    return np.cos(angle_rad) * u + np.sin(angle_rad) * w


def _flavored_token(base: np.ndarray, u_eff: np.ndarray, beta: float) -> np.ndarray:
    return _unit(base + beta * u_eff)


def token_flavor(tokens: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Cosine of each token against the unsafe direction; trailing axis is D."""
    norms = np.maximum(np.linalg.norm(tokens, axis=-1), 1e-12)
    return (tokens @ u) / norms


def style_sign(subject_token: np.ndarray, style_dir: np.ndarray) -> int:
    """Sign of the subject-slot token against the style direction (ties -> +1)."""
    return 1 if float(subject_token @ style_dir) >= 0.0 else -1


def prompt_is_unsafe(tokens: np.ndarray, u: np.ndarray, threshold: float) -> bool:
    """World semantic rule: unsafe iff any token past the style/subject slots is flavored."""
    flav = token_flavor(tokens, u)
    return bool(np.max(flav[2:]) >= threshold)


def generate_world(config: WorldConfig, seed: int) -> SynthDataset:
    """Build the full synthetic dataset deterministically from (config, seed)."""
    config.validate()
    d = config.embed_dim
    c, h, w = config.latent_shape
    n_z = c * h * w
    t_steps = config.total_steps
    l_max = config.max_length()
    max_k = config.max_planted

    root = np.random.default_rng(seed)
    u = _unit(root.standard_normal(d))
    style_raw = root.standard_normal(d)
    style_dir = _unit(style_raw - (style_raw @ u) * u)
    basis = root.standard_normal((n_z, 2))
    q, _ = np.linalg.qr(basis)
    pattern_a = np.ascontiguousarray(q[:, 0])
    pattern_b = np.ascontiguousarray(q[:, 1])
    vocab = np.stack([_benign_vector(root, u, config.vocab_flavor_cap)
                      for _ in range(config.vocab_size)])

    schedule = mock_schedule(t_steps)
    classes = [config.length_short, config.length_medium, config.length_long]
    per_class = config.pairs // 3

    n_groups = config.pairs * 2 * config.seeds_per_prompt * 2
    groups = {
        "pair_id": np.zeros(n_groups, dtype=np.int32),
        "variant": np.zeros(n_groups, dtype=np.int32),
        "seed_idx": np.zeros(n_groups, dtype=np.int32),
        "label": np.zeros(n_groups, dtype=np.int32),
        "length": np.zeros(n_groups, dtype=np.int32),
        "decoy": np.zeros(n_groups, dtype=np.int32),
        "planted_k": np.zeros(n_groups, dtype=np.int32),
        "planted_pos": np.full((n_groups, max_k), -1, dtype=np.int32),
        "carrier_sign": np.zeros(n_groups, dtype=np.int32),
        "m_star": np.zeros((n_groups, l_max), dtype=np.float32),
        "emb_safe": np.zeros((n_groups, l_max, d), dtype=np.float32),
        "emb_unsafe": np.zeros((n_groups, l_max, d), dtype=np.float32),
        "z": np.zeros((n_groups, t_steps, n_z), dtype=np.float32),
    }

    g = 0
    for pair_id in range(config.pairs):
        rng = np.random.default_rng([seed, pair_id])
        lo, hi = classes[pair_id // per_class if pair_id // per_class < 3 else 2]
        has_decoy = rng.random() < config.decoy_fraction

        for variant in (VARIANT_PLAIN, VARIANT_PARAPHRASE):
            length = int(rng.integers(lo, hi + 1))
            tokens_safe = vocab[rng.integers(0, config.vocab_size, size=length)].astype(np.float64)
            if variant == VARIANT_PLAIN:
                u_eff = u
            else:
                angle = np.deg2rad(rng.uniform(*config.adv_rot_deg))
                u_eff = _rotate(u, angle, rng)
            # slot 0: style token, sign alternating deterministically so the
            # carrier is exactly balanced within every label/fold slice
            style_target = 1 if (pair_id + variant) % 2 == 0 else -1
            v_style = _benign_vector(rng, u, config.vocab_flavor_cap)
            v_style -= (v_style @ style_dir) * style_dir
            tokens_safe[0] = _unit(v_style + config.style_strength * style_target * style_dir)
            # slot 1: subject; a decoy pair plants an unsafe-shaped token here
            # in both copies
            if has_decoy:
                v_dec = _benign_vector(rng, u, config.vocab_flavor_cap)
                tokens_safe[1] = _flavored_token(v_dec, u_eff, config.beta)

            weights = np.asarray(config.planted_weights, dtype=np.float64)
            k_choices = np.arange(config.min_planted, config.max_planted + 1)
            k = int(rng.choice(k_choices, p=weights / weights.sum()))
            k = min(k, length - 2)
            positions = rng.choice(np.arange(2, length), size=k, replace=False)
            tokens_unsafe = tokens_safe.copy()
            for pos in positions:
                tokens_unsafe[pos] = _flavored_token(tokens_safe[pos], u_eff, config.beta)

            m_star = build_pseudo_mask(tokens_safe[None], tokens_unsafe[None], config.tau)[0]
            expected = np.zeros(length)
            expected[positions] = 1.0
            if not np.array_equal(m_star, expected):
                raise ConfigError(
                    f"pair {pair_id}: planted offsets did not separate cleanly at "
                    f"tau={config.tau}; beta={config.beta} must exceed {BETA_LOWER_BOUND} "
                    f"with margin over the vocabulary flavor cap"
                )

            style = style_sign(tokens_safe[0], style_dir)
            for seed_idx in range(config.seeds_per_prompt):
                for label in (0, 1):
                    carrier = (2 * label - 1) * style
                    z0 = config.background_noise * rng.standard_normal(n_z)
                    z0 = z0 + config.signal_carrier * carrier * pattern_b
                    if label == 1:
                        z0 = z0 + config.signal_linear * pattern_a
                    eta = rng.standard_normal((t_steps, n_z))
                    ab = schedule[1 : t_steps + 1][:, None]
                    z_traj = np.sqrt(ab) * z0[None, :] + np.sqrt(1.0 - ab) * eta

                    groups["pair_id"][g] = pair_id
                    groups["variant"][g] = variant
                    groups["seed_idx"][g] = seed_idx
                    groups["label"][g] = label
                    groups["length"][g] = length
                    groups["decoy"][g] = int(has_decoy)
                    groups["planted_k"][g] = k
                    groups["planted_pos"][g, :k] = positions
                    groups["carrier_sign"][g] = carrier
                    if label == 1:
                        groups["m_star"][g, :length] = m_star
                    groups["emb_safe"][g, :length] = tokens_safe
                    groups["emb_unsafe"][g, :length] = tokens_unsafe
                    groups["z"][g] = z_traj
                    g += 1

    assert g == n_groups
    safe_token_rows = groups["emb_safe"].reshape(-1, d)
    used = np.repeat(groups["length"], l_max) > np.tile(np.arange(l_max), n_groups)
    prototype = safe_token_rows[used].mean(axis=0)

    groups["unsafe_direction"] = u.astype(np.float32)
    groups["style_direction"] = style_dir.astype(np.float32)
    groups["pattern_linear"] = pattern_a.astype(np.float32)
    groups["pattern_carrier"] = pattern_b.astype(np.float32)
    groups["safe_prototype"] = prototype.astype(np.float32)
    return SynthDataset(config, seed, groups)


def split(dataset: SynthDataset, ratio: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pair-disjoint item split: every step of a pair lands on one side."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    pairs = dataset.config.pairs
    order = np.random.default_rng(seed).permutation(pairs)
    n_train = int(round(pairs * ratio))
    train_pairs = np.zeros(pairs, dtype=bool)
    train_pairs[order[:n_train]] = True

    t_steps = dataset.config.total_steps
    group_pair = dataset.arrays["pair_id"]
    item_group = np.arange(dataset.n_items) // t_steps
    is_train = train_pairs[group_pair[item_group]]
    return np.flatnonzero(is_train), np.flatnonzero(~is_train)


_ARRAY_ORDER = (
    "pair_id", "variant", "seed_idx", "label", "length", "decoy", "planted_k",
    "planted_pos", "carrier_sign", "m_star", "emb_safe", "emb_unsafe", "z",
    "unsafe_direction", "style_direction", "pattern_linear", "pattern_carrier",
    "safe_prototype",
)


def _write_stream(dataset: SynthDataset, fh) -> None:
    manifest = []
    for name in _ARRAY_ORDER:
        arr = dataset.arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    header = {
        "version": FORMAT_VERSION,
        "seed": dataset.seed,
        "config": _config_to_jsonable(dataset.config),
        "counts": {"groups": dataset.n_groups, "items": dataset.n_items,
                   "steps": dataset.config.total_steps},
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header_bytes)))
    fh.write(header_bytes)
    for name in _ARRAY_ORDER:
        arr = np.ascontiguousarray(dataset.arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        fh.write(arr.tobytes())


def _config_to_jsonable(config: WorldConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def save_dataset(dataset: SynthDataset, path: str) -> None:
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        _write_stream(dataset, fh)
    os.replace(tmp, path)


def load_dataset(path: str, expect_embed_dim: int | None = None) -> SynthDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('version')}")

    config = _dataclass_from_dict(WorldConfig, header["config"], "dataset.config")
    if expect_embed_dim is not None and config.embed_dim != expect_embed_dim:
        raise FormatError(
            f"{path}: dataset embed_dim={config.embed_dim} does not match "
            f"expected embed_dim={expect_embed_dim}"
        )

    offset = 8 + header_len
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    missing = [n for n in _ARRAY_ORDER if n not in arrays]
    if missing:
        raise FormatError(f"{path}: missing arrays {missing}")
    return SynthDataset(config, header.get("seed", 0), arrays)


def per_step_probe_accuracy(dataset: SynthDataset, ridge: float = 1e-3) -> np.ndarray:
    """Per-step accuracy of a linear probe on the latent alone.

    Two-fold cross-validated LDA per step: fit pooled-covariance discriminant
    on one half of the groups, score the other, and average. Deterministic.
    """
    a = dataset.arrays
    labels = a["label"].astype(np.int64)
    t_steps = dataset.config.total_steps
    fold = a["pair_id"] % 2
    acc = np.zeros(t_steps)
    for step in range(t_steps):
        x = a["z"][:, step, :].astype(np.float64)
        correct = 0
        for f in (0, 1):
            tr = fold == f
            te = ~tr
            correct += _lda_correct(x[tr], labels[tr], x[te], labels[te], ridge)
        acc[step] = correct / dataset.n_groups
    return acc


def _lda_correct(x_tr, y_tr, x_te, y_te, ridge: float) -> int:
    mu0 = x_tr[y_tr == 0].mean(axis=0)
    mu1 = x_tr[y_tr == 1].mean(axis=0)
    centered = x_tr - np.where(y_tr[:, None] == 1, mu1, mu0)
    cov = centered.T @ centered / max(len(x_tr) - 2, 1)
    cov[np.diag_indices_from(cov)] += ridge
    w = np.linalg.solve(cov, mu1 - mu0)
    b = -0.5 * float(w @ (mu0 + mu1))
    pred = (x_te @ w + b > 0).astype(np.int64)
    return int(np.sum(pred == y_te))


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation of two equal-length sequences."""
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v), dtype=np.float64)
        r[order] = np.arange(1, len(v) + 1)
        # average ties
        vals, inv, counts = np.unique(v, return_inverse=True, return_counts=True)
        sums = np.zeros(len(vals))
        np.add.at(sums, inv, r)
        return sums[inv] / counts[inv]

    rx, ry = ranks(np.asarray(x)), ranks(np.asarray(y))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0
