"""
Model - Decoder-only pre-norm transformer with per-layer residual traces.
Any subset of layers can be skipped, leaving the residual stream untouched there.
"""

from dataclasses import dataclass, field, fields
from typing import AbstractSet, Iterator, Optional

import numpy as np

from src.errors import InputError, PreconditionError
from src.logger import get_logger
from src.schemas import ModelConfig
from src.tensor import Tensor, embedding, gelu, layer_norm, masked_softmax, matmul, no_grad, softmax

logger = get_logger(__name__)

INIT_SCALE = 0.02


@dataclass
class LayerParams:
    """Weights of one residual block: attention then feed-forward, each pre-normed."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def clone(self) -> "LayerParams":
        return LayerParams(**{name: Tensor(t.values.copy(), requires_grad=t.requires_grad) for name, t in self.named_tensors()})


@dataclass
class ModelParams:
    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    layers: list[LayerParams]
    final_gain: Tensor
    final_bias: Tensor
    output_projection: Tensor

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.named_tensors():
                yield f"layers.{index}.{name}", tensor
        yield "final_gain", self.final_gain
        yield "final_bias", self.final_bias
        yield "output_projection", self.output_projection

    def parameters(self) -> list[Tensor]:
        return [tensor for _, tensor in self.named_tensors()]

    def clone(self) -> "ModelParams":
        def copy(t: Tensor) -> Tensor:
            return Tensor(t.values.copy(), requires_grad=t.requires_grad)

        return ModelParams(
            config=self.config.model_copy(),
            token_embedding=copy(self.token_embedding),
            position_embedding=copy(self.position_embedding),
            layers=[layer.clone() for layer in self.layers],
            final_gain=copy(self.final_gain),
            final_bias=copy(self.final_bias),
            output_projection=copy(self.output_projection),
        )

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()


@dataclass
class ForwardTrace:
    """
    Logits plus residual-stream snapshots of one forward pass.

    Lists are aligned with `executed`: entry k belongs to model layer executed[k].
    """

    tokens: np.ndarray
    embedded: Tensor
    executed: list[int]
    layer_inputs: list[Tensor] = field(default_factory=list)
    layer_outputs: list[Tensor] = field(default_factory=list)
    attentions: list[Tensor] = field(default_factory=list)
    logits: Optional[Tensor] = None

    def position_of(self, layer: int) -> int:
        try:
            return self.executed.index(layer)
        except ValueError as e:
            raise PreconditionError(f"layer {layer} was not executed in this trace") from e

    def output_of(self, layer: int) -> Tensor:
        return self.layer_outputs[self.position_of(layer)]

    def attention_of(self, layer: int) -> Tensor:
        """Head-averaged attention probabilities [..., T, T] of `layer`."""
        probs = self.attentions[self.position_of(layer)]
        return probs.mean(axis=probs.ndim - 3)


def init_params(config: ModelConfig) -> ModelParams:
    """
    Deterministic initialisation from `config.seed`.

    Weights are 0.02·N(0,1); the two residual output projections of every
    block are further scaled by 1/sqrt(2·n_layers). Biases start at zero and
    layer-norm gains at one.
    """
    rng = np.random.default_rng(config.seed if config.seed is not None else 0)
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def weight(*shape: int, scale: float = 1.0) -> Tensor:
        return Tensor(INIT_SCALE * scale * rng.standard_normal(shape), requires_grad=True)

    def const(value: float, size: int) -> Tensor:
        return Tensor(np.full(size, value), requires_grad=True)

    token_embedding = weight(vocab, d)
    position_embedding = weight(config.max_seq_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                ln1_gain=const(1.0, d),
                ln1_bias=const(0.0, d),
                w_q=weight(d, d),
                b_q=const(0.0, d),
                w_k=weight(d, d),
                b_k=const(0.0, d),
                w_v=weight(d, d),
                b_v=const(0.0, d),
                w_o=weight(d, d, scale=residual_scale),
                b_o=const(0.0, d),
                ln2_gain=const(1.0, d),
                ln2_bias=const(0.0, d),
                w_ff1=weight(d, d_ff),
                b_ff1=const(0.0, d_ff),
                w_ff2=weight(d_ff, d, scale=residual_scale),
                b_ff2=const(0.0, d),
            )
        )
    return ModelParams(
        config=config,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        layers=layers,
        final_gain=const(1.0, d),
        final_bias=const(0.0, d),
        output_projection=weight(d, vocab),
    )


def param_count(params: ModelParams) -> int:
    return sum(tensor.size for tensor in params.parameters())


def param_bytes(params: ModelParams) -> int:
    return param_count(params) * 8


def block_param_count(config: ModelConfig) -> int:
    d, d_ff = config.d_model, config.d_ff
    return 4 * d * d + 2 * d * d_ff + 9 * d + d_ff


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for `config`."""
    d, vocab = config.d_model, config.vocab_size
    return vocab * d + config.max_seq_len * d + config.n_layers * block_param_count(config) + 2 * d + d * vocab


# Forward pass


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
        raise InputError(f"tokens must be a non-empty [T] or [B, T] array, got shape {tokens.shape}")
    if tokens.shape[-1] > config.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise InputError(f"token ids must lie in [0, {config.vocab_size})")
    return tokens


def _check_skip(config: ModelConfig, skip: AbstractSet[int]) -> None:
    bad = sorted(i for i in skip if not 0 <= i < config.n_layers)
    if bad:
        raise PreconditionError(f"skip indices {bad} outside [0, {config.n_layers})")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., T, d) -> (..., H, T, dh)
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, T, dh) -> (..., T, d)
    *lead, h, t, dh = x.shape
    n = len(lead)
    return x.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, t, h * dh)


def _attention(layer: LayerParams, h: Tensor, n_heads: int) -> tuple[Tensor, Tensor]:
    t = h.shape[-2]
    q = _split_heads(h @ layer.w_q + layer.b_q, n_heads)
    k = _split_heads(h @ layer.w_k + layer.b_k, n_heads)
    v = _split_heads(h @ layer.w_v + layer.b_v, n_heads)
    n = k.ndim
    scores = matmul(q, k.transpose(*range(n - 2), n - 1, n - 2)) / float(np.sqrt(q.shape[-1]))
    probs = masked_softmax(scores, np.tril(np.ones((t, t), dtype=bool)))
    return _merge_heads(probs @ v) @ layer.w_o + layer.b_o, probs


def _feed_forward(layer: LayerParams, h: Tensor) -> Tensor:
    return gelu(h @ layer.w_ff1 + layer.b_ff1) @ layer.w_ff2 + layer.b_ff2


def _block(layer: LayerParams, x: Tensor, n_heads: int) -> tuple[Tensor, Tensor]:
    attended, probs = _attention(layer, layer_norm(x, layer.ln1_gain, layer.ln1_bias), n_heads)
    x = x + attended
    x = x + _feed_forward(layer, layer_norm(x, layer.ln2_gain, layer.ln2_bias))
    return x, probs


def embed(params: ModelParams, tokens: np.ndarray) -> Tensor:
    t = tokens.shape[-1]
    return embedding(params.token_embedding, tokens) + embedding(params.position_embedding, np.arange(t))


def output_logits(params: ModelParams, x: Tensor) -> Tensor:
    return layer_norm(x, params.final_gain, params.final_bias) @ params.output_projection


def forward(params: ModelParams, tokens: np.ndarray, skip: AbstractSet[int] = frozenset()) -> ForwardTrace:
    """
    Run the model on `tokens` ([T] or [B, T]) with the layers in `skip` removed.

    Skipped layers leave the residual stream unchanged and get no trace entry.
    """
    config = params.config
    tokens = _check_tokens(config, tokens)
    _check_skip(config, skip)

    x = embed(params, tokens)
    trace = ForwardTrace(tokens=tokens, embedded=x, executed=[])
    for index, layer in enumerate(params.layers):
        if index in skip:
            continue
        trace.executed.append(index)
        trace.layer_inputs.append(x)
        x, probs = _block(layer, x, config.n_heads)
        trace.layer_outputs.append(x)
        trace.attentions.append(probs)
    trace.logits = output_logits(params, x)
    return trace


# Greedy decoding


class DecodeCache:
    """Per-layer key/value rows for incremental decoding of one sequence."""

    def __init__(self, params: ModelParams, executed: list[int]):
        config = params.config
        self.params = params
        self.executed = executed
        self.n_heads = config.n_heads
        self.keys = {i: np.zeros((config.n_heads, 0, config.head_dim)) for i in executed}
        self.values = {i: np.zeros((config.n_heads, 0, config.head_dim)) for i in executed}
        self.length = 0

    def step(self, token: int) -> np.ndarray:
        """Append one token and return next-token logits [V]."""
        p = self.params
        n_heads = self.n_heads
        # stream kept as [1, d]
        x = Tensor((p.token_embedding.values[token] + p.position_embedding.values[self.length])[None, :])
        for index in self.executed:
            layer = p.layers[index]
            h = layer_norm(x, layer.ln1_gain, layer.ln1_bias).values
            q = (h @ layer.w_q.values + layer.b_q.values).reshape(n_heads, 1, -1)
            k = (h @ layer.w_k.values + layer.b_k.values).reshape(n_heads, 1, -1)
            v = (h @ layer.w_v.values + layer.b_v.values).reshape(n_heads, 1, -1)
            self.keys[index] = np.concatenate([self.keys[index], k], axis=1)
            self.values[index] = np.concatenate([self.values[index], v], axis=1)
            scores = q @ np.swapaxes(self.keys[index], -1, -2) / np.sqrt(q.shape[-1])
            probs = softmax(Tensor(scores)).values
            context = (probs @ self.values[index]).reshape(1, -1)
            x = Tensor(x.values + (context @ layer.w_o.values + layer.b_o.values))
            x = x + _feed_forward(layer, layer_norm(x, layer.ln2_gain, layer.ln2_bias))
        self.length += 1
        return output_logits(p, x).values[0]


def generate_greedy(
    params: ModelParams,
    prompt: list[int],
    stop_token: int,
    max_new: int,
    skip: AbstractSet[int] = frozenset(),
    use_cache: bool = True,
) -> list[int]:
    """
    Deterministic argmax continuation of `prompt`.

    Stops when `stop_token` is produced (it is not returned) or after
    `max_new` tokens.
    """
    config = params.config
    if not prompt:
        raise PreconditionError("prompt must be non-empty")
    if max_new < 0:
        raise PreconditionError("max_new must be non-negative")
    if len(prompt) + max_new > config.max_seq_len:
        raise InputError(
            f"prompt length {len(prompt)} + max_new {max_new} exceeds max_seq_len {config.max_seq_len}"
        )
    _check_tokens(config, np.asarray(prompt))
    _check_skip(config, skip)

    generated: list[int] = []
    if max_new == 0:
        return generated

    with no_grad():
        if use_cache:
            cache = DecodeCache(params, [i for i in range(config.n_layers) if i not in skip])
            for token in prompt:
                logits = cache.step(token)
            for _ in range(max_new):
                next_token = int(np.argmax(logits))
                if next_token == stop_token:
                    break
                generated.append(next_token)
                if len(generated) == max_new:
                    break
                logits = cache.step(next_token)
        else:
            sequence = list(prompt)
            for _ in range(max_new):
                trace = forward(params, np.asarray(sequence), skip)
                assert trace.logits is not None
                next_token = int(np.argmax(trace.logits.values[-1]))
                if next_token == stop_token:
                    break
                generated.append(next_token)
                sequence.append(next_token)
    return generated
