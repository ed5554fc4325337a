"""Plug-and-play inference: per-step detection, single-shot redirection, cooldown.

The session detects on the current (possibly already redirected) embedding but
always applies the shift to the base embedding captured at session start, so
consecutive interventions never accumulate. After an intervention the counter
blocks detection for K steps; it decrements once per step and detection
resumes when it reaches zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import SessionError
from .layers import Linear, MLP, Module
from .redirection import redirect_from_base
from .world import SynthDataset, mock_schedule, prompt_is_unsafe, style_sign


@dataclass
class StepRecord:
    index: int       # 1-based execution order
    t: int           # schedule step, runs T down to 1
    detected: bool
    intervened: bool
    cooldown_after: int


@dataclass
class GuidanceSession:
    base_p_emb: np.ndarray
    ref_norms: np.ndarray
    cooldown: int
    alpha_scale: float
    hard_mask: bool = False
    current_p_hat: np.ndarray = None
    cnt: int = 0
    log: list[StepRecord] = field(default_factory=list)

    @classmethod
    def start(cls, p_emb: np.ndarray, cooldown: int, alpha_scale: float,
              hard_mask: bool = False) -> "GuidanceSession":
        base = np.array(p_emb, copy=True)
        base.setflags(write=False)
        norms = ops.l2_norm(base, axis=-1)
        norms.setflags(write=False)
        return cls(base_p_emb=base, ref_norms=norms, cooldown=cooldown,
                   alpha_scale=alpha_scale, hard_mask=hard_mask, current_p_hat=base)


def session_step(session: GuidanceSession, z_t: np.ndarray, t: int, model) -> np.ndarray:
    """Advance the session by one denoising step; return the embedding to condition on."""
    index = len(session.log) + 1
    if session.cnt > 0:
        session.cnt -= 1
        session.log.append(StepRecord(index, t, detected=False, intervened=False,
                                      cooldown_after=session.cnt))
        return session.current_p_hat

    emb = session.current_p_hat
    if emb.shape[-1] != model.cfg.embed_dim:
        raise SessionError(
            f"embedding width {emb.shape[-1]} does not match model embed_dim {model.cfg.embed_dim}")
    try:
        state = model.forward(z_t[None], np.array([t]), emb[None].astype(model.dtype),
                              training=False)
    except Exception as exc:  # surface config/shape problems as session errors
        raise SessionError(f"model rejected session inputs at step t={t}: {exc}") from exc
    out = state.output
    unsafe = bool(model.decide(out.logits)[0] == 1)
    if unsafe:
        p_hat = redirect_from_base(
            session.base_p_emb[None].astype(np.float64),
            out.delta[0][None].astype(np.float64),
            out.mask[0][None].astype(np.float64),
            out.alpha[0][None].astype(np.float64),
            session.alpha_scale,
            session.ref_norms[None].astype(np.float64),
            hard_mask=session.hard_mask,
        )[0]
        session.current_p_hat = p_hat
        session.cnt = session.cooldown
        session.log.append(StepRecord(index, t, detected=True, intervened=True,
                                      cooldown_after=session.cnt))
    else:
        session.log.append(StepRecord(index, t, detected=False, intervened=False,
                                      cooldown_after=0))
    return session.current_p_hat


@dataclass
class GenerationTrace:
    steps: list[StepRecord]
    latents: np.ndarray       # (T, C, H, W): the z_t seen at each step
    embeddings: np.ndarray    # (T, L, D): the conditioning used at each step
    intervention_steps: list[int]
    final_signal: np.ndarray  # (C, H, W): the fully denoised synthetic signal
    final_embedding: np.ndarray
    base_embedding: np.ndarray
    label: int
    pair_id: int
    group: int
    seed: int

    def intervention_count(self) -> int:
        return len(self.intervention_steps)


def run_generation(dataset: SynthDataset, group: int, model, total_steps: int,
                   cooldown: int, alpha_scale: float, seed: int,
                   hook_enabled: bool = True, hard_mask: bool = False) -> GenerationTrace:
    """Simulate a denoising run for one world prompt, with the guidance hook.

    The mock denoiser contracts the latent toward the clean signal the world
    associates with the current conditioning embedding: unsafe-flavored
    embeddings (outside the subject slot) keep the unsafe latent pattern,
    redirected ones lose it. It exists to exercise the hook, not to model
    diffusion faithfully.
    """
    cfg = dataset.config
    c, h, w = cfg.latent_shape
    n_z = c * h * w
    a = dataset.arrays
    length = int(a["length"][group])
    label = int(a["label"][group])
    emb = (a["emb_unsafe"] if label == 1 else a["emb_safe"])[group, :length].astype(np.float64)

    rng = np.random.default_rng([seed, group])
    background = cfg.background_noise * rng.standard_normal(n_z)
    u = dataset.unsafe_direction.astype(np.float64)
    style_dir = dataset.style_direction.astype(np.float64)
    pat_a = dataset.pattern_linear.astype(np.float64)
    pat_b = dataset.pattern_carrier.astype(np.float64)

    def clean_signal(embedding: np.ndarray) -> np.ndarray:
        flag = prompt_is_unsafe(embedding, u, cfg.flavor_threshold)
        style = style_sign(embedding[0], style_dir)
        carrier = (2 * int(flag) - 1) * style
        z0 = background + cfg.signal_carrier * carrier * pat_b
        if flag:
            z0 = z0 + cfg.signal_linear * pat_a
        return z0

    schedule = mock_schedule(total_steps)
    session = GuidanceSession.start(emb, cooldown, alpha_scale, hard_mask)
    z = rng.standard_normal(n_z)  # z_T: pure noise under the cosine schedule

    latents = np.zeros((total_steps, c, h, w), dtype=np.float64)
    embeddings = np.zeros((total_steps, length, emb.shape[-1]), dtype=np.float64)
    interventions = []
    for i, t in enumerate(range(total_steps, 0, -1)):
        latents[i] = z.reshape(c, h, w)
        if hook_enabled:
            cond = session_step(session, z.reshape(c, h, w), t, model)
            if session.log[-1].intervened:
                interventions.append(i + 1)
        else:
            cond = session.current_p_hat
        embeddings[i] = cond
        target = clean_signal(cond)
        ab_next = schedule[t - 1]
        eta = rng.standard_normal(n_z)
        z = np.sqrt(ab_next) * target + np.sqrt(1.0 - ab_next) * eta

    return GenerationTrace(
        steps=list(session.log), latents=latents, embeddings=embeddings,
        intervention_steps=interventions, final_signal=z.reshape(c, h, w),
        final_embedding=np.array(session.current_p_hat, copy=True),
        base_embedding=np.array(session.base_p_emb, copy=True),
        label=label, pair_id=int(a["pair_id"][group]), group=group, seed=seed)


def trace_to_jsonable(trace: GenerationTrace) -> dict:
    return {
        "seed": trace.seed,
        "group": trace.group,
        "pair_id": trace.pair_id,
        "label": trace.label,
        "intervention_steps": trace.intervention_steps,
        "steps": [{"index": s.index, "t": s.t, "detected": s.detected,
                   "intervened": s.intervened, "cooldown_after": s.cooldown_after}
                  for s in trace.steps],
        "final_signal": trace.final_signal.tolist(),
        "final_embedding": trace.final_embedding.tolist(),
        "embeddings": trace.embeddings.tolist(),
    }


class ReferenceDetector(Module):
    """Position-aware text-only classifier used as the frozen forget judge.

    Scores each token from its embedding and position code, pools by max, and
    thresholds at zero. Trained separately from the deployed model on the
    training split.
    """

    def __init__(self, rng, d_model: int, pos_dim: int, hidden: int, max_len: int,
                 dtype=np.float64):
        super().__init__(dtype)
        self.d_model = d_model
        self.pos_dim = pos_dim
        self.net = self.add_module("net", MLP(rng, [d_model + pos_dim, hidden, 1], dtype))
        self._pos = ops.sinusoid_encoding(np.arange(max_len), pos_dim, dtype=dtype)
        self._cache = None

    def scores(self, tokens: np.ndarray) -> np.ndarray:
        b, length, _ = tokens.shape
        pos = np.broadcast_to(self._pos[None, :length, :], (b, length, self.pos_dim))
        x = np.concatenate([tokens.astype(self.dtype), pos], axis=-1)
        return self.net.forward(x)[..., 0]

    def forward(self, tokens: np.ndarray) -> np.ndarray:
        s = self.scores(tokens)
        arg = np.argmax(s, axis=1)
        self._cache = (s.shape, arg)
        return s[np.arange(s.shape[0]), arg]

    def backward(self, g: np.ndarray) -> None:
        shape, arg = self._cache
        gs = np.zeros(shape, dtype=self.dtype)
        gs[np.arange(shape[0]), arg] = g
        self.net.backward(gs[..., None])

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        """1 = unsafe, 0 = safe, for a (B, L, D) batch."""
        return (self.forward(tokens) > 0.0).astype(np.int64)


def train_reference_detector(dataset: SynthDataset, train_groups: np.ndarray, seed: int = 0,
                             epochs: int = 60, lr: float = 3e-3,
                             hidden: int = 48) -> ReferenceDetector:
    from .training import AdamW

    rng = np.random.default_rng([seed, 17])
    det = ReferenceDetector(rng, dataset.config.embed_dim, 16, hidden,
                            dataset.config.max_length())
    opt = AdamW(det.parameters(), lr=lr, weight_decay=1e-4)
    a = dataset.arrays
    labels_all = a["label"]
    lengths_all = a["length"]

    for _ in range(epochs):
        order = rng.permutation(train_groups)
        for length in np.unique(lengths_all[order]):
            sel = order[lengths_all[order] == length]
            for start in range(0, len(sel), 256):
                gsel = sel[start : start + 256]
                labels = labels_all[gsel].astype(np.float64)
                tokens = np.where((labels[:, None, None] == 1),
                                  a["emb_unsafe"][gsel, :length],
                                  a["emb_safe"][gsel, :length]).astype(np.float64)
                logit = det.forward(tokens)
                p = ops.sigmoid(logit)
                g = (p - labels) / len(gsel)
                det.zero_grad()
                det.backward(g)
                opt.step()
    return det


def evaluate_safety(traces: list[GenerationTrace], dataset: SynthDataset,
                    ref_detector: ReferenceDetector, overhead_ratio: float | None = None) -> dict:
    """Forget/preserve metrics over a set of generation traces."""
    unsafe_traces = [tr for tr in traces if tr.label == 1]
    safe_traces = [tr for tr in traces if tr.label == 0]

    forgotten = 0
    shift_sum = 0.0
    shift_n = 0
    for tr in unsafe_traces:
        verdict = int(ref_detector.predict(tr.final_embedding[None].astype(np.float64))[0])
        forgotten += int(verdict == 0)
        planted = dataset.arrays["planted_pos"][tr.group]
        planted = planted[planted >= 0]
        disp = np.linalg.norm(tr.final_embedding - tr.base_embedding, axis=-1)
        shift_sum += float(np.sum(disp[planted]))
        shift_n += len(planted)

    passthrough = 0
    for tr in safe_traces:
        untouched = (tr.intervention_count() == 0
                     and np.array_equal(tr.final_embedding, tr.base_embedding))
        passthrough += int(untouched)

    hist: dict[int, int] = {}
    for tr in traces:
        hist[tr.intervention_count()] = hist.get(tr.intervention_count(), 0) + 1

    return {
        "forget_rate": forgotten / len(unsafe_traces) if unsafe_traces else float("nan"),
        "benign_passthrough_rate": passthrough / len(safe_traces) if safe_traces else float("nan"),
        "mean_masked_shift": shift_sum / shift_n if shift_n else 0.0,
        "intervention_count_hist": hist,
        "overhead_ratio": overhead_ratio,
    }


def measure_overhead(dataset: SynthDataset, model, groups: list[int], total_steps: int,
                     cooldown: int, alpha_scale: float, seed: int) -> float:
    """Wall-time ratio of generation with the hook enabled vs disabled."""
    t0 = time.perf_counter()
    for g in groups:
        run_generation(dataset, g, model, total_steps, cooldown, alpha_scale, seed,
                       hook_enabled=model is not None)
    t_hook = time.perf_counter() - t0
    t0 = time.perf_counter()
    for g in groups:
        run_generation(dataset, g, None, total_steps, cooldown, alpha_scale, seed,
                       hook_enabled=False)
    t_plain = time.perf_counter() - t0
    return t_hook / max(t_plain, 1e-9)
