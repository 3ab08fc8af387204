"""Permutation-equivariant set encoders with policy and predictor heads.

A feature token is ``[x * m, m, z]``: the (hidden unless revealed) value, the
mask bit and the feature's descriptor. Networks take tokens shaped
``[batch, n, token_dim]`` plus an availability mask; padded positions are
marked unavailable and never influence real positions.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from vardfs import diffcore as dc
from vardfs.diffcore import Tensor
from vardfs.errors import ConfigError, DegenerateError, FormatError

ARCHS = ("deepsets", "attention", "none")
POOLINGS = ("masked-mean", "attention-pool")
ACTIVATIONS = ("relu", "sine")
CONTEXTS = ("available", "revealed")
CHECKPOINT_FORMAT = "vardfs-checkpoint-v1"


@dataclass
class SetEncoderConfig:
    arch: str = "attention"
    hidden_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    input_activation: str = "relu"
    sine_scale: float = 10.0
    context: str = "available"

    def __post_init__(self):
        if self.context not in CONTEXTS:
            raise ConfigError(f"unknown context mode {self.context!r}; expected one of {CONTEXTS}")
        if self.input_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown input activation {self.input_activation!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown encoder arch {self.arch!r}; expected one of {ARCHS}")
        if self.hidden_dim <= 0 or self.num_blocks < 0:
            raise ConfigError("hidden_dim must be positive and num_blocks nonnegative")
        if self.arch == "attention" and (self.num_heads <= 0 or self.hidden_dim % self.num_heads):
            raise ConfigError(f"num_heads={self.num_heads} must divide hidden_dim={self.hidden_dim}")


def make_tokens(values, mask, descriptors):
    """Concatenate ``[x * m, m, z]`` along the last axis.

    ``values`` is [b, n, v], ``descriptors`` [b, n, c] and ``mask`` [b, n]; the
    mask may be a tensor so that relaxed masks keep their gradient.
    """
    values = np.asarray(values, dtype=np.float64)
    b, n = values.shape[:2]
    m = dc.reshape(dc.as_tensor(mask), (b, n, 1))
    return dc.concat([dc.mul(values, m), m, dc.as_tensor(descriptors)], axis=-1)


def _weights_or_available(weights, available):
    """``weights`` with all-zero rows replaced by the availability mask."""
    avail = available.astype(np.float64)
    if weights is None:
        return Tensor(avail)
    w = dc.as_tensor(weights)
    empty = w.data.sum(axis=1) <= 0
    if not empty.any():
        return w
    keep = (~empty).astype(np.float64)[:, None]
    return dc.add(dc.mul(w, keep), avail * empty[:, None])


def _check_available(available):
    available = np.asarray(available, dtype=bool)
    if available.ndim != 2 or not np.all(available.any(axis=1)):
        raise DegenerateError("every instance needs at least one available feature")
    return available


class Module:
    """Parameter container with a stable, insertion-ordered name space."""

    def __init__(self):
        self.params = {}

    def _param(self, name, shape, rng, fan_in=None, zero=False):
        if zero:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in if fan_in is not None else shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise FormatError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise FormatError(f"parameter {k}: shape {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class SetEncoder(Module):
    """Maps tokens [b, n, d] to per-token embeddings [b, n, h].

    ``deepsets`` blocks add a transformed masked-mean context to every token;
    the context averages over available tokens, or with ``context="revealed"``
    over the ``context_weights`` the caller passes (the revealed set);
    ``attention`` blocks are pre-norm multi-head self-attention with padded
    keys masked out, followed by a token-wise MLP. ``none`` returns the tokens.
    """

    def __init__(self, config, in_dim, rng, prefix="enc"):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        h = config.hidden_dim
        self.out_dim = in_dim if config.arch == "none" else h
        if config.arch == "none":
            return
        p = prefix
        self.w_in = self._param(f"{p}.in.w", (in_dim, h), rng)
        self.b_in = self._param(f"{p}.in.b", (h,), rng, fan_in=in_dim)
        if config.input_activation == "sine":
            # high-frequency start so coordinates can resolve fine spatial detail
            self.w_in.data *= config.sine_scale
            self.b_in.data = rng.uniform(-math.pi, math.pi, size=h)
        self.blocks = []
        for i in range(config.num_blocks):
            q = f"{p}.block{i}"
            if config.arch == "deepsets":
                self.blocks.append({
                    "self": self._param(f"{q}.self.w", (h, h), rng),
                    "ctx": self._param(f"{q}.ctx.w", (h, h), rng),
                    "b": self._param(f"{q}.b", (h,), rng, fan_in=h),
                })
            else:
                blk = {}
                for ln in ("ln1", "ln2"):
                    blk[f"{ln}.g"] = self._param(f"{q}.{ln}.g", (h,), rng, zero=True)
                    blk[f"{ln}.g"].data += 1.0
                    blk[f"{ln}.b"] = self._param(f"{q}.{ln}.b", (h,), rng, zero=True)
                for name in ("q", "k", "v", "o"):
                    blk[name] = self._param(f"{q}.{name}.w", (h, h), rng)
                blk["ff1.w"] = self._param(f"{q}.ff1.w", (h, 2 * h), rng)
                blk["ff1.b"] = self._param(f"{q}.ff1.b", (2 * h,), rng, fan_in=h)
                blk["ff2.w"] = self._param(f"{q}.ff2.w", (2 * h, h), rng)
                blk["ff2.b"] = self._param(f"{q}.ff2.b", (h,), rng, fan_in=2 * h)
                self.blocks.append(blk)

    def __call__(self, tokens, available, context_weights=None):
        available = _check_available(available)
        tokens = dc.as_tensor(tokens)
        if self.config.arch == "none":
            return tokens
        h = dc.linear(tokens, self.w_in, self.b_in)
        if self.config.input_activation == "sine":
            h = dc.sin(h)
        elif self.config.arch == "deepsets":
            h = dc.relu(h)
        if self.config.arch == "deepsets":
            use = context_weights if self.config.context == "revealed" else None
            ctx_w = _weights_or_available(use, available)
            for blk in self.blocks:
                h = self._deepsets_block(h, ctx_w, blk)
        else:
            for blk in self.blocks:
                h = self._attention_block(h, available, blk)
        return h

    @staticmethod
    def _deepsets_block(h, weights, blk):
        b, n, d = h.shape
        ctx = dc.reshape(dc.mean_pool(h, weights), (b, 1, d))
        upd = dc.add(dc.add(dc.matmul(h, blk["self"]), dc.matmul(ctx, blk["ctx"])), blk["b"])
        return dc.add(h, dc.relu(upd))

    def _attention_block(self, h, available, blk):
        b, n, d = h.shape
        heads = self.config.num_heads
        hd = d // heads
        x = dc.layer_norm(h, blk["ln1.g"], blk["ln1.b"])

        def split(w):
            return dc.transpose(dc.reshape(dc.matmul(x, w), (b, n, heads, hd)), (0, 2, 1, 3))

        q, k, v = split(blk["q"]), split(blk["k"]), split(blk["v"])
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = dc.masked_softmax(scores, available[:, None, None, :])
        ctx = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        h = dc.add(h, dc.matmul(ctx, blk["o"]))
        x = dc.layer_norm(h, blk["ln2.g"], blk["ln2.b"])
        ff = dc.linear(dc.relu(dc.linear(x, blk["ff1.w"], blk["ff1.b"])), blk["ff2.w"], blk["ff2.b"])
        return dc.add(h, ff)


class PolicyNet(Module):
    """Per-feature selection logits from a shared head on encoder embeddings."""

    def __init__(self, encoder_config, token_dim, rng, value_dim=1):
        super().__init__()
        self.encoder_config = encoder_config
        self.token_dim = token_dim
        self.value_dim = value_dim
        self.encoder = SetEncoder(encoder_config, token_dim, rng, prefix="policy.enc")
        self.params.update(self.encoder.params)
        self.w_head = self._param("policy.head.w", (self.encoder.out_dim, 1), rng)
        self.b_head = self._param("policy.head.b", (1,), rng, zero=True)

    def __call__(self, tokens, available):
        """Raw logits [b, n] as a tensor; masking is the caller's business."""
        tokens = dc.as_tensor(tokens)
        revealed = dc.mul(tokens[..., self.value_dim],
                          np.asarray(available, dtype=np.float64))
        emb = self.encoder(tokens, available, context_weights=revealed)
        b, n = emb.shape[:2]
        return dc.reshape(dc.linear(emb, self.w_head, self.b_head), (b, n))

    def describe(self):
        return {"kind": "policy", "encoder": asdict(self.encoder_config), "token_dim": self.token_dim,
                "value_dim": self.value_dim}


class PredictorNet(Module):
    """Permutation-invariant classifier: encoder, set pooling, then an MLP head.

    ``masked-mean`` pools embeddings weighted by the mask bit (times the
    revealed value being nonzero when ``presence_weighting`` is on, which is
    the document setting: average over revealed words that occur). Rows whose
    weights are all zero fall back to the plain mean over available tokens.
    ``attention-pool`` uses one learned query over the available tokens.
    """

    def __init__(self, encoder_config, token_dim, n_classes, rng, pooling="attention-pool",
                 presence_weighting=False, value_dim=1, head_hidden=None, zero_head=False):
        super().__init__()
        if pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
        if n_classes < 2:
            raise ConfigError("need at least two classes")
        self.encoder_config = encoder_config
        self.token_dim = token_dim
        self.n_classes = n_classes
        self.pooling = pooling
        self.presence_weighting = presence_weighting
        self.value_dim = value_dim
        self.encoder = SetEncoder(encoder_config, token_dim, rng, prefix="predictor.enc")
        self.params.update(self.encoder.params)
        e = self.encoder.out_dim
        hh = head_hidden or encoder_config.hidden_dim
        self.head_hidden = hh
        if pooling == "attention-pool":
            self.w_query = self._param("predictor.pool.q", (e, 1), rng)
        self.w1 = self._param("predictor.head1.w", (e, hh), rng)
        self.b1 = self._param("predictor.head1.b", (hh,), rng, fan_in=e)
        self.w2 = self._param("predictor.head2.w", (hh, n_classes), rng, zero=zero_head)
        self.b2 = self._param("predictor.head2.b", (n_classes,), rng, zero=True)

    def pool_weights(self, tokens, available, mask=None):
        """Nonnegative pooling weights [b, n] for masked-mean mode."""
        tokens = dc.as_tensor(tokens)
        v = self.value_dim
        if mask is None:
            mask = Tensor(tokens.data[..., v])
        mask = dc.as_tensor(mask)
        gate = available.astype(np.float64)
        if self.presence_weighting:
            gate = gate * np.any(tokens.data[..., :v] != 0, axis=-1)
        return _weights_or_available(dc.mul(mask, gate), available)

    def __call__(self, tokens, available, mask=None):
        """Class logits [b, K]. ``mask`` optionally supplies a differentiable mask column."""
        available = _check_available(available)
        weights = self.pool_weights(tokens, available, mask)
        emb = self.encoder(tokens, available, context_weights=weights)
        if self.pooling == "masked-mean":
            pooled = dc.mean_pool(emb, weights)
        else:
            b, n, e = emb.shape
            scores = dc.reshape(dc.scale(dc.matmul(emb, self.w_query), 1.0 / math.sqrt(e)), (b, n))
            pooled = dc.mean_pool(emb, dc.masked_softmax(scores, available))
        hidden = dc.relu(dc.linear(pooled, self.w1, self.b1))
        return dc.linear(hidden, self.w2, self.b2)

    def describe(self):
        return {"kind": "predictor", "encoder": asdict(self.encoder_config),
                "token_dim": self.token_dim, "n_classes": self.n_classes,
                "pooling": self.pooling, "presence_weighting": self.presence_weighting,
                "value_dim": self.value_dim, "head_hidden": self.head_hidden}


def encode(encoder, tokens, available):
    return encoder(tokens, available).data


def policy_logits(net, tokens, available, selected):
    """Logits with selected and unavailable positions set to -inf."""
    available = np.asarray(available, dtype=bool)
    selected = np.asarray(selected, dtype=bool)
    if np.any(selected & ~available):
        raise ValueError("selected positions must be available")
    raw = net(tokens, available).data
    return np.where(available & ~selected, raw, -np.inf)


def predict(net, tokens, available):
    """Class probabilities [b, K] under hard masks read from the tokens."""
    return dc.masked_softmax(net(tokens, available)).data


def _net_from_description(desc, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = SetEncoderConfig(**desc["encoder"])
    if desc["kind"] == "policy":
        return PolicyNet(enc, desc["token_dim"], rng, value_dim=desc.get("value_dim", 1))
    return PredictorNet(enc, desc["token_dim"], desc["n_classes"], rng, pooling=desc["pooling"],
                        presence_weighting=desc["presence_weighting"],
                        value_dim=desc["value_dim"], head_hidden=desc["head_hidden"])


def save_checkpoint(path, policy, predictor, meta=None):
    """Write both networks and free-form ``meta`` to an ``.npz`` container."""
    header = {"format": CHECKPOINT_FORMAT, "policy": policy.describe(),
              "predictor": predictor.describe(), "meta": meta or {}}
    arrays = {f"policy:{k}": v for k, v in policy.state_dict().items()}
    arrays.update({f"predictor:{k}": v for k, v in predictor.state_dict().items()})
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(policy, predictor, meta)`` from a checkpoint written by ``save_checkpoint``."""
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise FormatError(f"{path}: not a vardfs checkpoint")
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        nets = {}
        for kind in ("policy", "predictor"):
            net = _net_from_description(header[kind])
            prefix = f"{kind}:"
            net.load_state_dict({k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)})
            nets[kind] = net
    return nets["policy"], nets["predictor"], header["meta"]
