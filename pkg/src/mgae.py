"""Masked graph autoencoder over featurized scene graphs.

Encoder layers use edge-conditioned mean aggregation with separate weights for
incoming and outgoing messages::

    h'_v = act(h_v W_self + mean_{u->v}[h_u || x_e] W_in + mean_{v->w}[h_w || x_e] W_out + b)

Pretraining masks node features, encodes, swaps masked embeddings for a
re-mask token, decodes back to feature space and scores masked rows with the
scaled cosine error. Only the encoder is kept afterwards.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from src import tensor_autodiff as ad
from src.errors import NonFiniteError, ShapeError, TrainingDivergenceError
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 128
DEFAULT_HIDDEN = 256
NEGATIVE_SLOPE = 0.2


@dataclass
class LayerParams:
    W_self: ad.Tensor
    W_in: ad.Tensor
    W_out: ad.Tensor
    bias: ad.Tensor

    @property
    def d_in(self):
        return self.W_self.shape[0]

    @property
    def d_out(self):
        return self.W_self.shape[1]

    def tensors(self, prefix):
        return {
            f"{prefix}.W_self": self.W_self,
            f"{prefix}.W_in": self.W_in,
            f"{prefix}.W_out": self.W_out,
            f"{prefix}.bias": self.bias,
        }

    @classmethod
    def from_tensors(cls, params, prefix):
        return cls(params[f"{prefix}.W_self"], params[f"{prefix}.W_in"],
                   params[f"{prefix}.W_out"], params[f"{prefix}.bias"])


@dataclass
class EncoderModel:
    layers: List[LayerParams]
    mask_token: ad.Tensor

    @property
    def d_t(self):
        return self.mask_token.shape[1]

    @property
    def d_z(self):
        return self.layers[-1].d_out

    @property
    def hidden(self):
        return self.layers[0].d_out if len(self.layers) > 1 else self.d_z

    def parameters(self):
        params = {"encoder.mask_token": self.mask_token}
        for i, layer in enumerate(self.layers):
            params.update(layer.tensors(f"encoder.layer{i}"))
        return params


@dataclass
class DecoderModel:
    layer: LayerParams
    remask_token: ad.Tensor

    def parameters(self):
        params = {"decoder.remask_token": self.remask_token}
        params.update(self.layer.tensors("decoder.layer"))
        return params


@dataclass
class PretrainConfig:
    mask_rate: float = 0.5
    gamma: float = 2.0
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    hidden: int = DEFAULT_HIDDEN
    layers: int = 2

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be at least 1, got {self.gamma}")
        if self.epochs < 0 or self.batch_size < 1 or self.layers < 1 or self.hidden < 1:
            raise ValueError("epochs must be >= 0; batch_size, layers and hidden must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class PretrainResult:
    encoder: EncoderModel
    epoch_losses: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class MessageOperators:
    """Mean-aggregation matrices for one graph (all constant)."""
    in_adjacency: np.ndarray
    out_adjacency: np.ndarray
    in_edge_means: np.ndarray
    out_edge_means: np.ndarray


def message_operators(fg):
    n = fg.graph.node_count
    index = fg.graph.node_index()
    in_adjacency = np.zeros((n, n))
    out_adjacency = np.zeros((n, n))
    in_edge_means = np.zeros((n, fg.d_t))
    out_edge_means = np.zeros((n, fg.d_t))
    for k, edge in enumerate(fg.graph.edges):
        src, dst = index[edge.src], index[edge.dst]
        in_adjacency[dst, src] += 1.0
        in_edge_means[dst] += fg.edge_features[k]
        out_adjacency[src, dst] += 1.0
        out_edge_means[src] += fg.edge_features[k]

    in_degree = in_adjacency.sum(axis=1, keepdims=True)
    out_degree = out_adjacency.sum(axis=1, keepdims=True)
    in_scale = np.divide(1.0, in_degree, out=np.zeros_like(in_degree), where=in_degree > 0)
    out_scale = np.divide(1.0, out_degree, out=np.zeros_like(out_degree), where=out_degree > 0)
    return MessageOperators(in_adjacency * in_scale, out_adjacency * out_scale,
                            in_edge_means * in_scale, out_edge_means * out_scale)


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_layer(rng, d_in, d_out, d_t):
    return LayerParams(
        W_self=ad.Tensor.parameter(_glorot(rng, d_in, d_out)),
        W_in=ad.Tensor.parameter(_glorot(rng, d_in + d_t, d_out)),
        W_out=ad.Tensor.parameter(_glorot(rng, d_in + d_t, d_out)),
        bias=ad.Tensor.parameter(np.zeros((1, d_out))),
    )


def init_encoder(d_t, hidden=DEFAULT_HIDDEN, layers=2, rng=None):
    """Encoder with widths d_t -> hidden (x layers-1) -> 128."""
    rng = rng if rng is not None else rng_stream(0, "init")
    widths = [d_t] + [hidden] * (layers - 1) + [EMBEDDING_DIM]
    return EncoderModel(
        layers=[init_layer(rng, widths[i], widths[i + 1], d_t) for i in range(layers)],
        mask_token=ad.Tensor.parameter(np.zeros((1, d_t))),
    )


def init_decoder(d_t, rng=None):
    rng = rng if rng is not None else rng_stream(0, "init")
    return DecoderModel(
        layer=init_layer(rng, EMBEDDING_DIM, d_t, d_t),
        remask_token=ad.Tensor.parameter(np.zeros((1, EMBEDDING_DIM))),
    )


def mp_layer(features, fg, p, ops=None, negative_slope=NEGATIVE_SLOPE):
    """One message-passing step; negative_slope=1.0 gives the linear pre-activation."""
    features = features if isinstance(features, ad.Tensor) else ad.Tensor.constant(features)
    n = fg.graph.node_count
    if features.shape != (n, p.d_in):
        raise ShapeError("mp_layer", features.shape, (n, p.d_in))
    if p.W_in.shape[0] != p.d_in + fg.d_t:
        raise ShapeError("mp_layer", p.W_in.shape, (p.d_in + fg.d_t, p.d_out))
    ops = ops if ops is not None else message_operators(fg)

    incoming = ad.concat_cols([ad.matmul(ops.in_adjacency, features), ops.in_edge_means])
    outgoing = ad.concat_cols([ad.matmul(ops.out_adjacency, features), ops.out_edge_means])
    pre = ad.add(ad.matmul(features, p.W_self), ad.matmul(incoming, p.W_in))
    pre = ad.add(pre, ad.matmul(outgoing, p.W_out))
    pre = ad.add(pre, p.bias)
    return ad.leaky_relu(pre, negative_slope)


def mask_size(n, rate):
    return max(1, int(math.floor(rate * n + 0.5)))


def _replace_rows(values, mask, token):
    """Rows of values listed in mask are swapped for token; gradients reach both."""
    n = values.shape[0]
    indicator = np.zeros((n, 1))
    indicator[list(mask), 0] = 1.0
    keep = np.diag(1.0 - indicator[:, 0])
    return ad.add(ad.matmul(keep, values), ad.matmul(indicator, token))


def masked_features(fg, mask, m):
    return _replace_rows(ad.Tensor.constant(fg.node_features), mask, m.mask_token)


def mask_nodes(fg, rate, rng, m):
    """Choose max(1, round(rate*n)) nodes uniformly and replace their features by m's mask token."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    n = fg.graph.node_count
    mask = np.sort(rng.choice(n, size=mask_size(n, rate), replace=False))
    return masked_features(fg, mask, m), mask


def encode(fg, m, features=None, ops=None):
    """Node embeddings (n×128) from the stacked encoder layers."""
    h = features if features is not None else ad.Tensor.constant(fg.node_features)
    ops = ops if ops is not None else message_operators(fg)
    for layer in m.layers:
        h = mp_layer(h, fg, layer, ops)
    return h


def remask_decode(H, mask, d, fg, ops=None):
    """Swap masked embeddings for the re-mask token, then decode to feature width."""
    if len(mask):
        H = _replace_rows(H, mask, d.remask_token)
    return mp_layer(H, fg, d.layer, ops)


def sce_loss(x, x_hat, mask, gamma=2.0):
    """Mean over masked rows of (1 - cos(x_v, x_hat_v)) ** gamma."""
    if len(mask) == 0:
        raise ValueError("sce_loss needs a non-empty mask set")
    x = x if isinstance(x, ad.Tensor) else ad.Tensor.constant(x)
    n = x.shape[0]
    select = np.zeros((len(mask), n))
    select[np.arange(len(mask)), list(mask)] = 1.0
    cos = ad.cosine_similarity_rows(ad.matmul(select, x), ad.matmul(select, x_hat))
    return ad.mean(ad.pow(ad.shift(ad.scale(cos, -1.0), 1.0), gamma))


def reconstruction_loss(fg, encoder, decoder, mask, gamma=2.0, ops=None, masked=None):
    """Full masked-autoencoding loss of one graph for a fixed mask set."""
    ops = ops if ops is not None else message_operators(fg)
    if masked is None:
        masked = masked_features(fg, mask, encoder)
    H = encode(fg, encoder, masked, ops)
    x_hat = remask_decode(H, mask, decoder, fg, ops)
    return sce_loss(fg.node_features, x_hat, mask, gamma)


def pretrain(dataset, cfg):
    """Self-supervised training of encoder+decoder; returns the encoder and epoch losses."""
    if not dataset:
        raise ValueError("pretraining needs at least one graph")
    d_t = dataset[0].d_t
    init_rng = rng_stream(cfg.seed, "init")
    encoder = init_encoder(d_t, cfg.hidden, cfg.layers, init_rng)
    decoder = init_decoder(d_t, init_rng)
    result = PretrainResult(encoder=encoder)
    if cfg.epochs == 0:
        return result

    mask_rng = rng_stream(cfg.seed, "mask")
    batch_rng = rng_stream(cfg.seed, "batch")
    operators = [message_operators(fg) for fg in dataset]
    params = {**encoder.parameters(), **decoder.parameters()}
    state = ad.AdamState(lr=cfg.lr)
    logger.info("Pretraining on %d graphs for %d epochs (mask_rate=%.2f, gamma=%.1f)",
                len(dataset), cfg.epochs, cfg.mask_rate, cfg.gamma)

    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ad.current_tape().reset()
            try:
                total = None
                for i in batch:
                    fg = dataset[i]
                    masked, mask = mask_nodes(fg, cfg.mask_rate, mask_rng, encoder)
                    loss = reconstruction_loss(fg, encoder, decoder, mask, cfg.gamma, operators[i], masked)
                    total = loss if total is None else ad.add(total, loss)
                total = ad.scale(total, 1.0 / len(batch))
            except NonFiniteError as exc:
                raise TrainingDivergenceError(f"pretraining diverged in epoch {epoch + 1}: {exc}") from exc
            value = total.item()
            grads = ad.backward(total)
            ad.adam_step(params, ad.named_gradients(params, grads), state)
            batch_losses.append(value)
            logger.debug("epoch %d batch loss %.6f", epoch + 1, value)

        epoch_loss = float(np.mean(batch_losses))
        if not math.isfinite(epoch_loss):
            raise TrainingDivergenceError(f"pretraining loss is non-finite in epoch {epoch + 1}")
        result.epoch_losses.append(epoch_loss)
        logger.info("pretrain epoch %d/%d mean SCE %.6f", epoch + 1, cfg.epochs, epoch_loss)
    return result


def scene_embedding(fg, m, ops=None, track=False):
    """Mean readout of the encoder's node embeddings (1×128).

    Runs without recording unless track is set; training loops that need
    gradients through the encoder pass track=True.
    """
    if track:
        return ad.row_mean(encode(fg, m, ops=ops))
    with ad.no_grad():
        return ad.row_mean(encode(fg, m, ops=ops))


def embed_dataset(dataset, m):
    """{scene_id: 1×128 array} for a list of FeaturizedGraphs, in scene_id order."""
    embeddings = {}
    with ad.no_grad():
        for fg in sorted(dataset, key=lambda f: f.graph.scene_id):
            embeddings[fg.graph.scene_id] = scene_embedding(fg, m).numpy()
    return embeddings


def encoder_header(m, cfg, extra=None):
    header = {
        "d_t": m.d_t,
        "hidden": m.hidden,
        "d_z": m.d_z,
        "layers": len(m.layers),
        "mask_rate": cfg.mask_rate,
        "gamma": cfg.gamma,
        "seed": cfg.seed,
    }
    header.update(extra or {})
    return header


def encoder_from_parameters(params):
    count = len({name.split(".")[1] for name in params if name.startswith("encoder.layer")})
    layers = [LayerParams.from_tensors(params, f"encoder.layer{i}") for i in range(count)]
    encoder = EncoderModel(layers=layers, mask_token=params["encoder.mask_token"])
    if encoder.d_z != EMBEDDING_DIM:
        raise ShapeError("encoder checkpoint", (encoder.d_z,), (EMBEDDING_DIM,))
    return encoder


def save_encoder(path, m, cfg, extra=None):
    ad.save_checkpoint(path, m.parameters(), encoder_header(m, cfg, extra))


def load_encoder(path):
    params, header = ad.load_checkpoint(path)
    return encoder_from_parameters(params), header
