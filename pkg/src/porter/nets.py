"""Policy networks: MLP actor-critic with a Gaussian head, transformer
history encoder, FiLM adapter, residual action adapter, and the stack that
composes them into one action-producing unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all MLP dims must be >= 1")


def _init_linear(params: ParameterSet, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, scale: float = 1.0, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = scale / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params.add(f"{name}.w", w)
    params.add(f"{name}.b", np.zeros(fan_out))


class Mlp:
    """Fully connected tanh network. Hidden pre-activations can be modulated
    layer-by-layer (FiLM hook); the output layer is never modulated."""

    def __init__(self, spec: MlpSpec, params: ParameterSet, prefix: str,
                 rng: np.random.Generator, out_scale: float = 1.0,
                 zero_last: bool = False):
        self.spec = spec
        self.params = params
        self.prefix = prefix
        dims = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            last = i == self.n_layers - 1
            _init_linear(params, f"{prefix}.l{i}", dims[i], dims[i + 1], rng,
                         scale=out_scale if last else 1.0,
                         zero=zero_last and last)

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return self.spec.hidden

    def zero_output_layer(self):
        i = self.n_layers - 1
        for suffix in ("w", "b"):
            name = f"{self.prefix}.l{i}.{suffix}"
            self.params.load_value(name, np.zeros(self.params[name].shape,
                                                  dtype=np.float32))

    def forward(self, x: Tensor, modulator=None) -> Tensor:
        for i in range(self.n_layers):
            w = self.params[f"{self.prefix}.l{i}.w"]
            b = self.params[f"{self.prefix}.l{i}.b"]
            x = x @ w + b
            if i < self.n_layers - 1:
                if modulator is not None:
                    x = modulator(i, x)
                x = x.tanh()
        return x


# ---------------------------------------------------------------------------
# Gaussian head
# ---------------------------------------------------------------------------

class GaussianHead:
    """State-independent per-dimension log-std for a diagonal Gaussian."""

    def __init__(self, params: ParameterSet, name: str, dim: int,
                 init_std: float):
        self.params = params
        self.name = name
        self.dim = dim
        params.add(name, np.full(dim, math.log(init_std)))

    @property
    def log_std(self) -> Tensor:
        return self.params[self.name]

    def std(self) -> np.ndarray:
        return np.exp(self.params[self.name].data)


def gaussian_log_prob(mean: Tensor, log_std: Tensor, actions) -> Tensor:
    """Diagonal-Gaussian log density of `actions` (summed over action dim)."""
    a = Tensor(np.asarray(actions, dtype=mean.dtype), op="actions")
    inv_std = (-log_std).exp()
    z = (a - mean) * inv_std
    per_dim = z * z * 0.5 + log_std + 0.5 * LOG_2PI
    return -per_dim.sum(axis=-1)


def gaussian_kl(mu_old, std_old, mu_new, std_new) -> float:
    """Mean KL(old || new) between diagonal Gaussians, numpy inputs."""
    var_old = std_old ** 2
    var_new = std_new ** 2
    kl = (np.log(std_new / std_old)
          + (var_old + (mu_old - mu_new) ** 2) / (2.0 * var_new) - 0.5)
    return float(np.mean(np.sum(kl, axis=-1)))


# ---------------------------------------------------------------------------
# transformer history encoder
# ---------------------------------------------------------------------------

class HistoryEncoder:
    """Two-layer, four-head transformer over an H-step observation window.

    Tokens are per-timestep feature vectors projected into d_model; learned
    additive position embeddings carry time ordering. The latent is read off
    the most recent token.
    """

    def __init__(self, params: ParameterSet, prefix: str, token_dim: int,
                 window: int, rng: np.random.Generator, d_model: int = 64,
                 n_layers: int = 2, n_heads: int = 4, ff_dim: int = 128,
                 latent_dim: int = 64):
        if d_model % n_heads:
            raise ValueError("d_model must divide into heads")
        self.prefix = prefix
        self.params = params
        self.token_dim = token_dim
        self.window = window
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.latent_dim = latent_dim

        p = prefix
        _init_linear(params, f"{p}.proj", token_dim, d_model, rng)
        params.add(f"{p}.pos", 0.02 * rng.standard_normal((window, d_model)))
        for i in range(n_layers):
            q = f"{p}.layer{i}"
            params.add(f"{q}.ln1.g", np.ones(d_model))
            params.add(f"{q}.ln1.b", np.zeros(d_model))
            for h in ("q", "k", "v", "o"):
                _init_linear(params, f"{q}.att.{h}", d_model, d_model, rng)
            params.add(f"{q}.ln2.g", np.ones(d_model))
            params.add(f"{q}.ln2.b", np.zeros(d_model))
            _init_linear(params, f"{q}.ff1", d_model, ff_dim, rng)
            _init_linear(params, f"{q}.ff2", ff_dim, d_model, rng)
        params.add(f"{p}.lnf.g", np.ones(d_model))
        params.add(f"{p}.lnf.b", np.zeros(d_model))
        _init_linear(params, f"{p}.out", d_model, latent_dim, rng)

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def forward(self, tokens: Tensor) -> Tensor:
        """tokens (B, H, D) -> latent (B, latent_dim)."""
        b, h, d = tokens.shape
        if h != self.window or d != self.token_dim:
            raise ad.ShapeError(
                f"encoder expects (B, {self.window}, {self.token_dim}), got {tokens.shape}")
        p = self.prefix
        x = self._linear(tokens, f"{p}.proj") + self.params[f"{p}.pos"]
        nh, dk = self.n_heads, self.d_head
        for i in range(self.n_layers):
            q = f"{p}.layer{i}"
            hpre = self._ln(x, f"{q}.ln1")
            qs = self._split_heads(self._linear(hpre, f"{q}.att.q"), b, h, nh, dk)
            ks = self._split_heads(self._linear(hpre, f"{q}.att.k"), b, h, nh, dk)
            vs = self._split_heads(self._linear(hpre, f"{q}.att.v"), b, h, nh, dk)
            scores = (qs @ ks.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
            ctx = ad.softmax(scores, axis=-1) @ vs
            merged = ctx.transpose((0, 2, 1, 3)).reshape(b, h, self.d_model)
            x = x + self._linear(merged, f"{q}.att.o")
            h2 = self._ln(x, f"{q}.ln2")
            x = x + self._linear(self._linear(h2, f"{q}.ff1").tanh(), f"{q}.ff2")
        last = x[:, -1, :]
        return self._linear(self._ln(last, f"{p}.lnf"), f"{p}.out")

    @staticmethod
    def _split_heads(x: Tensor, b: int, h: int, nh: int, dk: int) -> Tensor:
        return x.reshape(b, h, nh, dk).transpose((0, 2, 1, 3))


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

def film_modulate(y: Tensor, gamma: Tensor, beta: Tensor,
                  clamp: float = 3.0) -> Tensor:
    """Feature-wise affine residual: y'_i = y_i * (1 + g_i) + b_i, with the
    multiplicative term clamped to +-clamp."""
    if y.shape[-1] != gamma.shape[-1] or y.shape[-1] != beta.shape[-1]:
        raise ad.ShapeError("film dims do not match feature vector")
    return y * (gamma.clamp(-clamp, clamp) + 1.0) + beta


class FilmAdapter:
    """One conditioning network per modulated layer, latent -> (gamma, beta).

    Final layers are zero-initialized so modulation starts as the identity.
    """

    def __init__(self, params: ParameterSet, prefix: str, latent_dim: int,
                 layer_widths: tuple[int, ...], rng: np.random.Generator,
                 hidden_dim: int = 128, clamp: float = 3.0):
        self.params = params
        self.prefix = prefix
        self.layer_widths = tuple(layer_widths)
        self.clamp = clamp
        self.nets = []
        for i, width in enumerate(self.layer_widths):
            spec = MlpSpec(latent_dim, (hidden_dim,), 2 * width)
            self.nets.append(Mlp(spec, params, f"{prefix}.cond{i}", rng,
                                 zero_last=True))

    def zero_init(self):
        for net in self.nets:
            net.zero_output_layer()

    def gamma_beta(self, latent: Tensor, layer_index: int) -> tuple[Tensor, Tensor]:
        width = self.layer_widths[layer_index]
        out = self.nets[layer_index].forward(latent)
        return out[..., :width], out[..., width:]

    def modulate(self, y: Tensor, latent: Tensor, layer_index: int) -> Tensor:
        gamma, beta = self.gamma_beta(latent, layer_index)
        return film_modulate(y, gamma, beta, self.clamp)

    def modulator(self, latent: Tensor):
        return lambda i, y: self.modulate(y, latent, i)


class ResidualActionAdapter:
    """MLP from [latent; proprioceptive window; goal] to a corrective action.

    Zero-initialized final layer: the correction starts exactly at zero.
    """

    def __init__(self, params: ParameterSet, prefix: str, input_dim: int,
                 hidden: tuple[int, ...], action_dim: int,
                 rng: np.random.Generator):
        self.mlp = Mlp(MlpSpec(input_dim, tuple(hidden), action_dim), params,
                       prefix, rng, zero_last=True)

    def zero_init(self):
        self.mlp.zero_output_layer()

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp.forward(x)


def compose_residual_action(a_base, a_residual, alpha_base: float,
                            alpha_residual: float, q_default):
    """Final joint targets alpha_base*a + alpha_residual*a_tilde + q_default.

    Works on both numpy arrays and graph tensors.
    """
    if isinstance(a_base, np.ndarray) and isinstance(a_residual, np.ndarray):
        if a_base.shape[-1] != a_residual.shape[-1] or \
                a_base.shape[-1] != np.shape(q_default)[-1]:
            raise ValueError("composition operands must share the action length")
    return a_base * alpha_base + a_residual * alpha_residual + q_default


def zero_init_adapter(adapter):
    """Re-zero the output stage of either adapter variant."""
    adapter.zero_init()
    return adapter


# ---------------------------------------------------------------------------
# policy stack
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StackLayout:
    """Observation group dims and windows the stack consumes."""
    prop_dim: int = 13
    obj_dim: int = 4
    priv_dim: int = 12
    goal_dim: int = 1
    action_dim: int = 4
    h_base: int = 5
    h_residual: int = 32
    latent_dim: int = 64

    @property
    def base_input_dim(self) -> int:
        return self.prop_dim * self.h_base + self.goal_dim

    @property
    def adapter_input_dim(self) -> int:
        return self.latent_dim + self.prop_dim * self.h_base + self.goal_dim

    @property
    def end2end_input_dim(self) -> int:
        return (self.prop_dim * self.h_base + self.obj_dim * self.h_residual
                + self.goal_dim)

    def encoder_token_dim(self, source: str) -> int:
        group = {"priv": self.priv_dim, "obj": self.obj_dim}[source]
        return self.prop_dim + group + self.goal_dim


@dataclass
class StackConfig:
    kind: str = "wb"                 # wb | jt | residual | end2end
    variant: str = "none"            # none | action | film
    encoder_source: str = "priv"     # priv | obj
    actor_hidden: tuple[int, ...] = (128, 64)
    adapter_hidden: tuple[int, ...] = (128, 64)
    film_hidden: int = 128
    film_clamp: float = 3.0
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_ff: int = 128
    alpha_base: float = 0.5
    alpha_residual: float = 0.1
    q_default: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    init_std_base: float = 1.0
    init_std_residual: float = 0.5
    jt_lower_channels: tuple[int, ...] = (0,)


class PolicyStack:
    """Frozen-or-trainable network composition behind one act() surface.

    Parameter groups {base, critic, encoder, adapter} are separate
    ParameterSets so stage transitions are load/freeze-time operations.
    """

    def __init__(self, layout: StackLayout, cfg: StackConfig, seed: int):
        self.layout = layout
        self.cfg = cfg
        if cfg.kind not in ("wb", "jt", "residual", "end2end"):
            raise ValueError(f"unknown stack kind {cfg.kind!r}")
        if cfg.kind == "residual" and cfg.variant not in ("action", "film"):
            raise ValueError("residual stack needs variant action|film")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.groups: dict[str, ParameterSet] = {}
        base = self._group("base")
        critic = self._group("critic")
        act_dim = layout.action_dim
        self.q_default = np.asarray(cfg.q_default, dtype=ad.DEFAULT_DTYPE)

        if cfg.kind in ("wb", "residual"):
            self.actor = Mlp(MlpSpec(layout.base_input_dim, cfg.actor_hidden,
                                     act_dim), base, "actor", rng, out_scale=0.1)
            self.base_head = GaussianHead(base, "log_std", act_dim,
                                          cfg.init_std_base)
        elif cfg.kind == "jt":
            lower = tuple(cfg.jt_lower_channels)
            upper = tuple(i for i in range(act_dim) if i not in lower)
            self.jt_channels = (lower, upper)
            self.actor_lower = Mlp(MlpSpec(layout.base_input_dim,
                                           cfg.actor_hidden, len(lower)),
                                   base, "actor_lower", rng, out_scale=0.1)
            self.actor_upper = Mlp(MlpSpec(layout.base_input_dim,
                                           cfg.actor_hidden, len(upper)),
                                   base, "actor_upper", rng, out_scale=0.1)
            self.base_head = GaussianHead(base, "log_std", act_dim,
                                          cfg.init_std_base)
        else:  # end2end
            self.actor = Mlp(MlpSpec(layout.end2end_input_dim, cfg.actor_hidden,
                                     act_dim), base, "actor", rng, out_scale=0.1)
            self.base_head = GaussianHead(base, "log_std", act_dim,
                                          cfg.init_std_base)

        if cfg.kind == "residual":
            enc = self._group("encoder")
            adp = self._group("adapter")
            self.encoder = HistoryEncoder(
                enc, "encoder", layout.encoder_token_dim(cfg.encoder_source),
                layout.h_residual, rng, d_model=layout.latent_dim,
                n_layers=cfg.encoder_layers, n_heads=cfg.encoder_heads,
                ff_dim=cfg.encoder_ff, latent_dim=layout.latent_dim)
            if cfg.variant == "action":
                self.adapter = ResidualActionAdapter(
                    adp, "adapter", layout.adapter_input_dim,
                    cfg.adapter_hidden, act_dim, rng)
            else:
                self.adapter = FilmAdapter(adp, "adapter", layout.latent_dim,
                                           self.actor.hidden_widths, rng,
                                           hidden_dim=cfg.film_hidden,
                                           clamp=cfg.film_clamp)
            self.residual_head = GaussianHead(adp, "log_std", act_dim,
                                              cfg.init_std_residual)
            self.critic = Mlp(MlpSpec(layout.adapter_input_dim,
                                      cfg.actor_hidden, 1), critic,
                              "critic", rng)
        else:
            in_dim = (layout.end2end_input_dim if cfg.kind == "end2end"
                      else layout.base_input_dim)
            self.critic = Mlp(MlpSpec(in_dim, cfg.actor_hidden, 1), critic,
                              "critic", rng)

    # ---- group plumbing ----

    def _group(self, name: str) -> ParameterSet:
        ps = ParameterSet()
        self.groups[name] = ps
        return ps

    def freeze(self, *names: str):
        for n in names:
            self.groups[n].set_requires_grad(False)

    def trainable_groups(self) -> list[str]:
        if self.cfg.kind == "residual":
            return ["encoder", "adapter", "critic"]
        return ["base", "critic"]

    # ---- input assembly ----

    def _base_input(self, frames: dict) -> np.ndarray:
        prop = frames["prop_hist"]
        h5 = prop[:, -self.layout.h_base:, :]
        return np.concatenate(
            [h5.reshape(h5.shape[0], -1), frames["goal"]], axis=1)

    def _encoder_tokens(self, frames: dict) -> np.ndarray:
        other = frames["priv_hist"] if self.cfg.encoder_source == "priv" \
            else frames["obj_hist"]
        prop = frames["prop_hist"]
        b, h, _ = prop.shape
        goal = np.repeat(frames["goal"][:, None, :], h, axis=1)
        return np.concatenate([prop, other, goal], axis=2)

    def _e2e_input(self, frames: dict) -> np.ndarray:
        prop = frames["prop_hist"][:, -self.layout.h_base:, :]
        obj = frames["obj_hist"]
        return np.concatenate([prop.reshape(prop.shape[0], -1),
                               obj.reshape(obj.shape[0], -1),
                               frames["goal"]], axis=1)

    # ---- forward passes ----

    def _mean_and_value(self, frames: dict) -> tuple[Tensor, Tensor, GaussianHead]:
        """Graph forward: composed action mean, value, and the active head."""
        cfg, lay = self.cfg, self.layout
        if cfg.kind == "residual":
            tokens = Tensor(self._encoder_tokens(frames), op="tokens")
            z = self.encoder.forward(tokens)
            base_in = Tensor(self._base_input(frames), op="obs")
            adapter_in = ad.concat([z, base_in], axis=1)
            if cfg.variant == "action":
                a_base = self.actor.forward(base_in)
                a_res = self.adapter.forward(adapter_in)
                mean = compose_residual_action(a_base, a_res, cfg.alpha_base,
                                               cfg.alpha_residual,
                                               Tensor(self.q_default))
            else:
                modulated = self.actor.forward(base_in,
                                               modulator=self.adapter.modulator(z))
                mean = compose_residual_action(
                    modulated, Tensor(np.zeros_like(self.q_default)),
                    cfg.alpha_base, cfg.alpha_residual, Tensor(self.q_default))
            value = self.critic.forward(adapter_in)
            return mean, value, self.residual_head
        if cfg.kind == "jt":
            base_in = Tensor(self._base_input(frames), op="obs")
            lower = self.actor_lower.forward(base_in)
            upper = self.actor_upper.forward(base_in)
            parts = [None] * lay.action_dim
            for j, ch in enumerate(self.jt_channels[0]):
                parts[ch] = lower[:, j:j + 1]
            for j, ch in enumerate(self.jt_channels[1]):
                parts[ch] = upper[:, j:j + 1]
            mean = ad.concat(parts, axis=1)
            value = self.critic.forward(base_in)
            return mean, value, self.base_head
        x = self._e2e_input(frames) if cfg.kind == "end2end" \
            else self._base_input(frames)
        obs = Tensor(x, op="obs")
        mean = self.actor.forward(obs)
        value = self.critic.forward(obs)
        return mean, value, self.base_head

    def act(self, frames: dict, stochastic: bool,
            rng: np.random.Generator | None = None):
        """Rollout-time action. Returns (applied, sampled, log_prob, value).

        `applied` is the final joint-target vector handed to the simulator;
        `sampled` is the random variable whose log-density PPO consumes
        (identical to `applied` in residual modes, the raw pre-composition
        action otherwise).
        """
        with ad.no_grad():
            mean, value, head = self._mean_and_value(frames)
            mu = mean.data
            std = head.std()
            if stochastic:
                eps = rng.standard_normal(mu.shape).astype(mu.dtype)
                sampled = mu + std * eps
            else:
                sampled = mu.copy()
            lp = gaussian_log_prob(Tensor(mu), head.log_std, sampled).data
            if self.cfg.kind == "residual":
                applied = sampled
            else:
                applied = compose_residual_action(
                    sampled, np.zeros_like(sampled), self.cfg.alpha_base,
                    self.cfg.alpha_residual, self.q_default)
        return applied, sampled, lp, value.data[:, 0], mu, std

    def act_deterministic(self, frames: dict) -> np.ndarray:
        return self.act(frames, stochastic=False)[0]

    def evaluate(self, frames: dict, sampled: np.ndarray):
        """Training-time graph forward for a minibatch.

        Returns (log_prob Tensor, entropy Tensor, value Tensor, mean Tensor,
        log_std Tensor).
        """
        mean, value, head = self._mean_and_value(frames)
        lp = gaussian_log_prob(mean, head.log_std, sampled)
        ent = (head.log_std + 0.5 * (LOG_2PI + 1.0)).sum()
        return lp, ent, value[:, 0], mean, head.log_std

    def values(self, frames: dict) -> np.ndarray:
        with ad.no_grad():
            _, value, _ = self._mean_and_value(frames)
        return value.data[:, 0]

    def latent(self, frames: dict) -> Tensor:
        tokens = Tensor(self._encoder_tokens(frames), op="tokens")
        return self.encoder.forward(tokens)

    # ---- distribution params for the curriculum loss ----

    def action_mean_tensor(self, frames: dict) -> Tensor:
        mean, _, _ = self._mean_and_value(frames)
        return mean

    def param_checksum(self, group: str) -> bytes:
        import hashlib
        digest = hashlib.sha256()
        ps = self.groups[group]
        for name in ps.names():
            digest.update(name.encode())
            digest.update(ps[name].data.tobytes())
        return digest.digest()
