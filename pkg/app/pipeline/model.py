# app/pipeline/model.py
"""
The two-stage model and its forward pass.

    features -> feature encoder -> U-VIB head -> z_m (per modality)
    z_i, z_t, z_a -> concat -> multi-modal encoder -> power norm -> channel
    -> receiver Gaussian head -> receiver decoder -> class logits

Training-time auxiliary decoders map each z_m to class logits for the
per-modality U-VIB likelihood; inference never touches them.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app.pipeline.channel import transmit
from app.pipeline.redundancy import PAIRS, Discriminator, PairScores, redundancy_loss
from app.pipeline.vib import GaussianHead, GaussianLatent, mvib_loss, reparameterize, uvib_loss
from app.schemas.config import ChannelConfig, ModelConfig
from app.schemas.dataset import MODALITIES, N_CLASSES, MultiModalBatch
from app.tools.rng import Rng
from app.tools.tensor import DenseStack, Graph, NonFiniteError, Parameter, Tensor


class NonFiniteLossError(FloatingPointError):
    def __init__(self, part: str, detail: str = ""):
        self.part = part
        super().__init__(f"non-finite value in loss part '{part}'" + (f": {detail}" if detail else ""))


@dataclass
class ModalityBranch:
    feature_encoder: Optional[DenseStack]     # None = identity
    head: GaussianHead
    decoder: DenseStack

    def parameters(self) -> List[Parameter]:
        enc = self.feature_encoder.parameters() if self.feature_encoder else []
        return enc + self.head.parameters() + self.decoder.parameters()

    def encoder_parameters(self) -> List[Parameter]:
        enc = self.feature_encoder.parameters() if self.feature_encoder else []
        return enc + self.head.parameters()


@dataclass
class ModelState:
    config: ModelConfig
    dims: Dict[str, int]
    branches: Dict[str, ModalityBranch]
    discriminators: Dict[str, Discriminator]
    encoder: DenseStack                       # fused latents -> transmitted dim
    receiver_head: GaussianHead
    receiver_decoder: DenseStack

    @property
    def fused_dim(self) -> int:
        return sum(self.config.latent_dims)

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for m in MODALITIES:
            params += self.branches[m].parameters()
        for name in PAIRS:
            params += self.discriminators[name].parameters()
        params += self.encoder.parameters()
        params += self.receiver_head.parameters() + self.receiver_decoder.parameters()
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def discriminator_parameters(self) -> List[Parameter]:
        return [p for name in PAIRS for p in self.discriminators[name].parameters()]

    def latent_encoder_parameters(self) -> List[Parameter]:
        """Parameters upstream of z_m: feature encoders and U-VIB heads."""
        return [p for m in MODALITIES for p in self.branches[m].encoder_parameters()]


def init_model(config: ModelConfig, dims: Dict[str, int], rng: Rng) -> ModelState:
    """Each component draws from its own child stream, so removing one
    component leaves the initial weights of the others unchanged."""
    streams = dict(zip(
        ["image", "text", "audio", "it", "ia", "ta", "encoder", "receiver"],
        rng.spawn(8),
    ))
    branches = {}
    for m, latent_dim in zip(MODALITIES, config.latent_dims):
        s = streams[m]
        if config.feature_hidden > 0:
            fenc = DenseStack(f"{m}.features", [dims[m], config.feature_hidden], s,
                              activation="tanh", out_activation="tanh")
            width = config.feature_hidden
        else:
            fenc, width = None, dims[m]
        branches[m] = ModalityBranch(
            feature_encoder=fenc,
            head=GaussianHead(f"{m}.head", width, latent_dim, s),
            decoder=DenseStack(f"{m}.decoder", [latent_dim, config.decoder_hidden, N_CLASSES], s,
                               activation="tanh"),
        )

    latent = dict(zip(MODALITIES, config.latent_dims))
    discriminators = {
        name: Discriminator(f"disc.{name}", latent[a] + latent[b], streams[name],
                            hidden=config.disc_hidden)
        for name, (a, b) in PAIRS.items()
    }
    fused = sum(config.latent_dims)
    encoder = DenseStack("encoder", [fused, config.fusion_hidden, config.transmitted_dim],
                         streams["encoder"], activation="tanh")
    r = streams["receiver"]
    return ModelState(
        config=config,
        dims=dict(dims),
        branches=branches,
        discriminators=discriminators,
        encoder=encoder,
        receiver_head=GaussianHead("receiver.head", config.transmitted_dim,
                                   config.receiver_latent_dim, r),
        receiver_decoder=DenseStack("receiver.decoder",
                                    [config.receiver_latent_dim, config.decoder_hidden, N_CLASSES],
                                    r, activation="tanh"),
    )


# ---------------------------------------------------------------------------
# Loss parts
# ---------------------------------------------------------------------------

@dataclass
class LossValues:
    """Float snapshot of one step's loss parts."""
    uvib: Dict[str, float]
    mvib: float
    redundancy: float = 0.0
    bce: Dict[str, float] = field(default_factory=dict)
    p_pos: Dict[str, float] = field(default_factory=dict)
    p_neg: Dict[str, float] = field(default_factory=dict)


@dataclass
class LossParts:
    uvib: Dict[str, Tensor]
    mvib: Tensor
    redundancy: Optional[Tensor] = None       # sum of pairwise J
    adversarial: Optional[Tensor] = None      # sum of pairwise BCE
    pairs: Dict[str, PairScores] = field(default_factory=dict)

    def values(self) -> LossValues:
        return LossValues(
            uvib={m: t.item() for m, t in self.uvib.items()},
            mvib=self.mvib.item(),
            redundancy=self.redundancy.item() if self.redundancy is not None else 0.0,
            bce={k: s.bce.item() for k, s in self.pairs.items()},
            p_pos={k: s.p_pos for k, s in self.pairs.items()},
            p_neg={k: s.p_neg for k, s in self.pairs.items()},
        )


@dataclass
class ForwardOutput:
    graph: Graph
    logits: Tensor                             # receiver class logits (n, 7)
    parts: LossParts
    latents: Dict[str, GaussianLatent]
    samples: Dict[str, Tensor]
    aux_logits: Dict[str, Tensor]
    receiver: GaussianLatent


class _part:
    """Re-raise node-level NonFiniteError as NonFiniteLossError naming the part."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and issubclass(exc_type, NonFiniteError):
            raise NonFiniteLossError(self.name, str(exc)) from exc
        return False


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def encode_modalities(graph: Graph, features: Dict[str, np.ndarray], model: ModelState,
                      rng: Optional[Rng], sample: bool = True):
    latents, samples = {}, {}
    for m in MODALITIES:
        branch = model.branches[m]
        h = graph.constant(features[m])
        if branch.feature_encoder is not None:
            h = branch.feature_encoder(graph, h)
        latent = branch.head(graph, h)
        latents[m] = latent
        samples[m] = reparameterize(graph, latent, rng=rng) if sample else latent.mean
    return latents, samples


def receive(graph: Graph, samples: Dict[str, Tensor], model: ModelState,
            channel: ChannelConfig, snr_db: float, channel_rng: Rng,
            sample_rng: Optional[Rng], sample: bool = True, family: Optional[str] = None):
    """Fuse, encode, transmit and decode. Returns (receiver latent, logits)."""
    fused = graph.concat([samples[m] for m in MODALITIES], axis=-1)
    x = model.encoder(graph, fused)
    x_hat = transmit(graph, x, channel, snr_db, channel_rng, family=family)
    latent = model.receiver_head(graph, x_hat)
    z = reparameterize(graph, latent, rng=sample_rng) if sample else latent.mean
    return latent, model.receiver_decoder(graph, z)


def forward_pass(batch: MultiModalBatch, model: ModelState, channel: ChannelConfig,
                 snr_db: float, alpha: float, rng: Rng, *, beta: float = 1e-3,
                 gamma: float = 1e-3, sample: bool = True, with_redundancy: bool = True,
                 graph: Optional[Graph] = None) -> ForwardOutput:
    """
    One pass over a batch. `rng` is split into four child streams (latent
    sampling, negatives, channel, receiver sampling) so that switching the
    redundancy path off changes no other draw.
    """
    if len(batch) < 2:
        raise ValueError(f"forward_pass needs a batch of at least 2, got {len(batch)}")
    graph = graph or Graph()
    latent_rng, neg_rng, channel_rng, recv_rng = rng.spawn(4)

    with _part("encoder"):
        latents, samples = encode_modalities(graph, batch.features, model, latent_rng, sample)

    uvib, aux = {}, {}
    for m in MODALITIES:
        with _part(f"uvib_{m}"):
            aux[m] = model.branches[m].decoder(graph, samples[m])
            uvib[m] = uvib_loss(graph, latents[m], aux[m], batch.label_class, beta)

    red = None
    if with_redundancy:
        with _part("redundancy"):
            red = redundancy_loss(graph, samples, model.discriminators, alpha, neg_rng,
                                  reverse_both=model.config.reverse_both)

    with _part("mvib"):
        receiver, logits = receive(graph, samples, model, channel, snr_db, channel_rng,
                                   recv_rng, sample=sample)
        mvib = mvib_loss(graph, receiver, logits, batch.label_class, gamma)

    parts = LossParts(
        uvib=uvib,
        mvib=mvib,
        redundancy=red.loss if red else None,
        adversarial=red.adversarial if red else None,
        pairs=red.pairs if red else {},
    )
    return ForwardOutput(graph=graph, logits=logits, parts=parts, latents=latents,
                         samples=samples, aux_logits=aux, receiver=receiver)


def infer(model: ModelState, features: Dict[str, np.ndarray], channel: ChannelConfig,
          snr_db: float, rng: Rng, family: Optional[str] = None):
    """Deterministic-mode inference: latent means, no auxiliary decoders.
    Returns (logits, {modality: latent mean}) as numpy arrays."""
    graph = Graph()
    latents, samples = encode_modalities(graph, features, model, None, sample=False)
    _, logits = receive(graph, samples, model, channel, snr_db, rng, None,
                        sample=False, family=family)
    return logits.numpy(), {m: latents[m].mean.numpy() for m in MODALITIES}
