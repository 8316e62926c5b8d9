"""Stage-1 VAE (encoder + one-shot decoder with a feature tap) and the Stage-2 generator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .grammar import ALPHABET

VOCAB = ALPHABET + ("[END]",)
END = len(ALPHABET)
_TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}


@dataclass(frozen=True)
class Dims:
    seq_len: int = 64
    vocab: int = len(VOCAB)
    d_tok: int = 256
    d_enc: int = 256
    d_z: int = 16
    d_trunk: int = 128
    d_phi: int = 32
    d_g: int = 128
    d_cond: int = 1
    d_alpha: int = 8


def token_ids(sequences: Sequence[Sequence[str]], seq_len: int) -> np.ndarray:
    """Pad token sequences with the end token into an integer (B, L) array."""
    out = np.full((len(sequences), seq_len), END, dtype=np.int64)
    for b, seq in enumerate(sequences):
        if len(seq) > seq_len:
            raise ValueError(f"sequence of length {len(seq)} exceeds maximum {seq_len}")
        out[b, : len(seq)] = [_TOKEN_ID[t] for t in seq]
    return out


def ids_to_tokens(ids: np.ndarray) -> list[list[str]]:
    """Cut each row at its first end token."""
    result = []
    for row in np.atleast_2d(ids):
        seq = []
        for i in row:
            if i == END:
                break
            seq.append(VOCAB[i])
        result.append(seq)
    return result


class Module:
    """A named bag of parameter tensors with freeze and state-dict helpers."""

    name = "module"

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
        self.frozen = False

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "Module":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise checkpoint.CheckpointError(f"missing tensors: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise checkpoint.CheckpointError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.value = np.array(state[k], dtype=np.float64)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class Encoder(Module):
    """Token sequence -> (mu, logvar).

    Each (position, token) pair has its own row in the embedding table, i.e.
    a token table conditioned on position. Rows are mean-pooled over the
    padded sequence and passed through a tanh MLP head. Additive position
    embeddings would be erased by the mean pool.
    """

    name = "encoder"

    def __init__(self, dims: Dims, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dims = dims
        super().__init__(
            {
                "embed": rng.normal(0.0, 1.0, (dims.seq_len * dims.vocab, dims.d_tok)),
                "b0": np.zeros(dims.d_tok),
                "w1": _glorot(rng, dims.d_tok, dims.d_enc),
                "b1": np.zeros(dims.d_enc),
                "w_mu": _glorot(rng, dims.d_enc, dims.d_z),
                "b_mu": np.zeros(dims.d_z),
                "w_lv": _glorot(rng, dims.d_enc, dims.d_z),
                "b_lv": np.zeros(dims.d_z),
            }
        )

    def __call__(self, ids: np.ndarray) -> tuple[Tensor, Tensor]:
        ids = np.atleast_2d(ids)
        B, L = ids.shape
        if L > self.dims.seq_len:
            raise ValueError(f"input length {L} exceeds maximum {self.dims.seq_len}")
        if L < self.dims.seq_len:
            ids = np.concatenate([ids, np.full((B, self.dims.seq_len - L), END, dtype=np.int64)], axis=1)
            L = self.dims.seq_len
        rows = np.arange(L)[None, :] * self.dims.vocab + ids
        pooled = ad.gather_rows(self["embed"], rows.reshape(-1)).reshape(B, L, self.dims.d_tok).mean(axis=1)
        h = ad.tanh(ad.tanh(pooled + self["b0"]) @ self["w1"] + self["b1"])
        mu = h @ self["w_mu"] + self["b_mu"]
        logvar = ad.clip(h @ self["w_lv"] + self["b_lv"], -8.0, 8.0)
        return mu, logvar


class Decoder(Module):
    """One-shot decoder: MLP trunk, per-position hidden states, shared token head.

    The feature tap is the position-mean of the per-position hidden layer,
    which is the layer right before the logits.
    """

    name = "decoder"

    def __init__(self, dims: Dims, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(1)
        self.dims = dims
        L, P = dims.seq_len, dims.d_phi
        super().__init__(
            {
                "w1": _glorot(rng, dims.d_z, dims.d_trunk),
                "b1": np.zeros(dims.d_trunk),
                "w_pos": rng.normal(0.0, math.sqrt(2.0 / (dims.d_trunk + P)), (dims.d_trunk, L * P)),
                "b_pos": rng.normal(0.0, 0.1, (L * P,)),
                "w_out": _glorot(rng, P, dims.vocab),
                "b_out": np.zeros((L, dims.vocab)),
            }
        )
        self.forward_calls = 0
        self.samples_decoded = 0

    def hidden(self, z) -> Tensor:
        z = ad.as_tensor(z)
        B = z.shape[0]
        t = ad.tanh(z @ self["w1"] + self["b1"])
        return ad.tanh(t @ self["w_pos"] + self["b_pos"]).reshape(B, self.dims.seq_len, self.dims.d_phi)

    def features(self, z) -> Tensor:
        """The feature tap alone (no logits); used as the drift feature map."""
        return self.hidden(z).mean(axis=1)

    def _head(self, H: Tensor) -> Tensor:
        B = H.shape[0]
        flat = H.reshape(B * self.dims.seq_len, self.dims.d_phi) @ self["w_out"]
        return flat.reshape(B, self.dims.seq_len, self.dims.vocab) + self["b_out"]

    def __call__(self, z) -> tuple[Tensor, Tensor]:
        """Return (logits (B, L, V), features (B, d_phi)) and count the pass."""
        H = self.hidden(z)
        self.forward_calls += 1
        self.samples_decoded += H.shape[0]
        return self._head(H), H.mean(axis=1)

    def logits(self, z) -> np.ndarray:
        """Logit values without counting a sampling pass (training diagnostics)."""
        return self._head(self.hidden(z)).value

    def decode_tokens(self, z) -> list[list[str]]:
        logits, _ = self(z)
        return ids_to_tokens(np.argmax(logits.value, axis=-1))


def alpha_embedding(alpha, d_alpha: int = 8) -> np.ndarray:
    """Sinusoidal features of log(alpha), scaled so alpha in [1, 8] maps to [0, 1]."""
    u = np.log(np.asarray(alpha, dtype=np.float64)).reshape(-1, 1) / math.log(8.0)
    k = np.arange(d_alpha // 2, dtype=np.float64).reshape(1, -1)
    angle = np.pi * (2.0**k) * u / 2.0
    return np.concatenate([np.sin(angle), np.cos(angle)], axis=1)


class Generator(Module):
    """Maps (noise, condition, guidance scale) to a latent in one forward pass.

    The last layer outputs standardized coordinates that are mapped back
    through the latent cache's per-dimension mean and std (fixed buffers).
    """

    name = "generator"

    def __init__(self, dims: Dims, rng: np.random.Generator | None = None, z_mean=None, z_std=None):
        rng = rng or np.random.default_rng(2)
        self.dims = dims
        d_in = dims.d_z + dims.d_cond + dims.d_alpha
        w1 = _glorot(rng, d_in, dims.d_g)
        w1[dims.d_z : dims.d_z + dims.d_cond] = 0.0
        super().__init__(
            {
                "w1": w1,
                "b1": np.zeros(dims.d_g),
                "w2": _glorot(rng, dims.d_g, dims.d_g),
                "b2": np.zeros(dims.d_g),
                "w3": _glorot(rng, dims.d_g, dims.d_z),
                "b3": np.zeros(dims.d_z),
                "null_cond": np.zeros(dims.d_cond),
            }
        )
        self.z_mean = np.zeros(dims.d_z) if z_mean is None else np.asarray(z_mean, dtype=np.float64)
        self.z_std = np.ones(dims.d_z) if z_std is None else np.asarray(z_std, dtype=np.float64)
        self.forward_calls = 0
        self.samples_generated = 0

    def __call__(self, eps, cond, alpha, null: bool = False) -> Tensor:
        eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        B = eps.shape[0]
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,))
        if np.any(alpha < 1.0) or np.any(alpha > 8.0):
            raise ValueError("guidance scale must lie in [1, 8]")
        self.forward_calls += 1
        self.samples_generated += B
        if null:
            c = ad.broadcast(self["null_cond"], (B, self.dims.d_cond))
        else:
            c = ad.as_tensor(np.asarray(cond, dtype=np.float64).reshape(B, self.dims.d_cond))
        x = ad.concat([ad.as_tensor(eps), c, ad.as_tensor(alpha_embedding(alpha, self.dims.d_alpha))], axis=1)
        h = ad.relu(x @ self["w1"] + self["b1"])
        h = ad.relu(h @ self["w2"] + self["b2"])
        out = h @ self["w3"] + self["b3"]
        return out * self.z_std + self.z_mean

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state["z_mean"] = self.z_mean.copy()
        state["z_std"] = self.z_std.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        self.z_mean = np.array(state["z_mean"])
        self.z_std = np.array(state["z_std"])


def vae_loss(ids: np.ndarray, mu: Tensor, logvar: Tensor, logits: Tensor, beta: float = 0.01):
    """Cross-entropy over all positions (end-token padded) plus beta * KL to N(0, I).

    Both terms are summed per molecule and averaged over the batch. Returns
    ``(total, recon, kl)``.
    """
    ids = np.atleast_2d(ids)
    B, L, V = logits.shape
    onehot = np.zeros((B, L, V))
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    recon = ad.scale(ad.sum_(ad.log_softmax(logits, axis=-1) * onehot), -1.0 / B)
    kl = ad.scale(ad.sum_(mu * mu + ad.exp(logvar) - 1.0 - logvar), 0.5 / B)
    return recon + ad.scale(kl, beta), recon, kl


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape)
    return mu + ad.exp(ad.scale(logvar, 0.5)) * eps


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        total = math.sqrt(sum(float((g * g).sum()) for g in grads))
        factor = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            factor = self.clip_norm / total
        for p, g, v in zip(self.params, grads, self.velocity):
            v *= self.momentum
            v += g * factor
            p.value = p.value - self.lr * v
        return total

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with bias correction and optional global-norm clipping."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in self.params]
        total = math.sqrt(sum(float((g * g).sum()) for g in grads))
        factor = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            factor = self.clip_norm / total
        self.t += 1
        c1, c2 = 1.0 - self.b1**self.t, 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * factor
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return total

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params: Sequence[Tensor], lr: float, clip_norm: float | None = None):
    if name == "adam":
        return Adam(params, lr, clip_norm=clip_norm)
    if name == "sgd":
        return SGD(params, lr, clip_norm=clip_norm)
    raise ValueError(f"unknown optimizer {name!r}")


class VAE:
    def __init__(self, dims: Dims, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dims = dims
        self.encoder = Encoder(dims, rng)
        self.decoder = Decoder(dims, rng)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"encoder/{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"decoder/{k}": v for k, v in self.decoder.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder/")})
        self.decoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("decoder/")})

    def save(self, path) -> None:
        checkpoint.save(path, "vae", self.state_dict(), asdict(self.dims))

    @classmethod
    def load(cls, path) -> "VAE":
        _, dims, tensors = checkpoint.load(path, "vae")
        vae = cls(Dims(**dims))
        vae.load_state_dict(tensors)
        return vae
