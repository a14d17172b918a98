"""The network: encoder GRU, codebook bottleneck, decoder GRU, emission head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import heads, quantizer
from .autograd import Tensor
from .data import Batch, FeatureConfig
from .errors import ContractError
from .quantizer import Codebook
from .recurrent import EncoderDecoderState, GRUCell, gru_step


@dataclass
class ModelConfig:
    head: str = "gaussian"
    codebook_size: int = 128
    encoder_size: int = 64
    decoder_size: int = 40
    commitment_cost: float = 0.25
    replace_threshold: float = 2.0
    decay: float = 0.99
    use_ema: bool = True
    quantize: bool = True
    kmeans_iters: int = 10

    def __post_init__(self):
        heads.check_family(self.head)
        if min(self.codebook_size, self.encoder_size, self.decoder_size) < 1:
            raise ContractError("codebook size and hidden sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnrollOutput:
    """Per-step losses plus what the codebook maintenance needs."""

    step_losses: list[Tensor]  # each (B,)
    nll: list[Tensor]
    encodings: np.ndarray  # (T, B, E)
    assignments: np.ndarray  # (T, B)
    params: list[heads.DistributionParams] = field(default_factory=list)

    def loss(self) -> Tensor:
        """Mean of every per-step loss over batch and time."""
        return ag.mean(ag.stack(self.step_losses))


class VQARModel:
    def __init__(self, cfg: ModelConfig, features: FeatureConfig, seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.cfg = cfg
        self.features = features
        E, H = cfg.encoder_size, cfg.decoder_size
        self.encoder = GRUCell(1 + features.num_features, E, rng)
        self.decoder = GRUCell(E, H, rng)
        self.head = heads.HeadProjection(cfg.head, H, rng)
        self.codebook = Codebook(cfg.codebook_size, E, cfg.decay, cfg.commitment_cost,
                                 cfg.replace_threshold, cfg.use_ema)
        self.embedding: Tensor | None = None
        if features.embedding_dim:
            self.embedding = Tensor(rng.normal(0.0, 1.0, (features.cardinality, features.embedding_dim)),
                                    requires_grad=True)

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.decoder.parameters() + self.head.parameters()
        if self.embedding is not None:
            params.append(self.embedding)
        if self.cfg.quantize:
            params += self.codebook.parameters()
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        state.update(self.encoder.state_dict("encoder"))
        state.update(self.decoder.state_dict("decoder"))
        state.update(self.head.state_dict("head"))
        if self.embedding is not None:
            state["embedding"] = self.embedding.data
        cb = self.codebook
        state["codebook.vectors"] = cb.vectors.data
        state["codebook.ema_cluster_size"] = cb.ema_cluster_size
        state["codebook.ema_sum"] = cb.ema_sum
        state["codebook.initialized"] = np.array(float(cb.initialized))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict(state, "encoder")
        self.decoder.load_state_dict(state, "decoder")
        self.head.load_state_dict(state, "head")
        if self.embedding is not None:
            self.embedding.data = np.array(state["embedding"], dtype=np.float64)
        cb = self.codebook
        cb.vectors.data = np.array(state["codebook.vectors"], dtype=np.float64)
        cb.ema_cluster_size = np.array(state["codebook.ema_cluster_size"], dtype=np.float64)
        cb.ema_sum = np.array(state["codebook.ema_sum"], dtype=np.float64)
        cb.initialized = bool(state["codebook.initialized"])

    # -- forward pieces ------------------------------------------------------
    def initial_state(self, batch: int) -> EncoderDecoderState:
        return EncoderDecoderState.zeros(self.cfg.encoder_size, self.cfg.decoder_size, batch)

    def embed(self, item_index: np.ndarray) -> Tensor | None:
        if self.embedding is None:
            return None
        return ag.take(self.embedding, np.asarray(item_index, dtype=np.int64))

    def encoder_input(self, x_prev: np.ndarray, cov: np.ndarray, emb: Tensor | None) -> Tensor:
        """``concat(x_{t-1}, c_t)`` where ``c_t`` ends with the identity embedding."""
        const = np.concatenate([np.asarray(x_prev, dtype=np.float64)[:, None], cov], axis=1)
        if emb is None:
            return Tensor(const)
        return ag.concat([Tensor(const), emb], axis=1)

    def step(self, state: EncoderDecoderState, x_prev: np.ndarray, cov: np.ndarray,
             emb: Tensor | None, fixed_index: np.ndarray | None = None):
        """One time step; returns (distribution params on the scaled axis, quantize result or None)."""
        state.h_enc = gru_step(self.encoder, self.encoder_input(x_prev, cov, emb), state.h_enc)
        qres = None
        if self.cfg.quantize:
            if fixed_index is None:
                qres = quantizer.quantize(state.h_enc, self.codebook)
            else:
                z = ag.take(self.codebook.vectors, fixed_index)
                qres = quantizer.QuantizeResult(np.asarray(fixed_index), z.data,
                                                ag.straight_through(state.h_enc, z), state.h_enc, z)
            dec_in = qres.st_output
        else:
            dec_in = state.h_enc
        state.h_dec = gru_step(self.decoder, dec_in, state.h_dec)
        return self.head(state.h_dec), qres

    def step_nll(self, p: heads.DistributionParams, scaled_x: np.ndarray, raw_x: np.ndarray,
                 nu: np.ndarray) -> Tensor:
        """Continuous heads score the scaled value; count heads score raw counts after rescaling."""
        if p.family == "neg_binomial":
            return heads.nll(heads.rescale(p, nu), raw_x)
        return heads.nll(p, scaled_x)

    def unroll(self, batch: Batch, fixed_assignments: np.ndarray | None = None,
               keep_params: bool = False) -> UnrollOutput:
        """Teacher-forced pass over every position t = 1 .. L-1 of the batch windows."""
        B, L = batch.scaled_target.shape
        if L < 2:
            raise ContractError("training windows need at least two points")
        state = self.initial_state(B)
        emb = self.embed(batch.item_index)
        step_losses, nlls, params = [], [], []
        encodings = np.zeros((L - 1, B, self.cfg.encoder_size))
        assignments = np.zeros((L - 1, B), dtype=np.int64)
        for t in range(1, L):
            fixed = None if fixed_assignments is None else fixed_assignments[t - 1]
            p, qres = self.step(state, batch.scaled_target[:, t - 1], batch.covariates[:, t], emb, fixed)
            nll = self.step_nll(p, batch.scaled_target[:, t], batch.raw_target[:, t], batch.nu)
            encodings[t - 1] = state.h_enc.data
            if qres is not None:
                assignments[t - 1] = qres.index
                step_losses.append(nll + quantizer.vq_loss(qres, self.codebook))
            else:
                step_losses.append(nll)
            nlls.append(nll)
            if keep_params:
                params.append(p)
        return UnrollOutput(step_losses, nlls, encodings, assignments, params)

    def encode_only(self, batch: Batch) -> np.ndarray:
        """Encoder states for every training position, no graph (codebook warm-up)."""
        B, L = batch.scaled_target.shape
        h = Tensor(np.zeros((B, self.cfg.encoder_size)))
        out = np.zeros((L - 1, B, self.cfg.encoder_size))
        with ag.no_grad():
            emb = self.embed(batch.item_index)
            for t in range(1, L):
                h = gru_step(self.encoder, self.encoder_input(batch.scaled_target[:, t - 1],
                                                              batch.covariates[:, t], emb), h)
                out[t - 1] = h.data
        return out
