"""Identity-conditioned toy latent diffusion: mergeable dual-branch control,
inversion-based face restoration, mask-guided multi-identity attention and an
analytic compute profiler."""
from .conditioning import FaceEncoder, TextEncoder, TrainSample, face_similarity
from .denoiser import ModelConfig, ToyDenoiser
from .diffusion import GuidanceConfig, NoiseSchedule, ToyAutoencoder, invert, make_schedule, sample
from .diir import RestorationJob, RestoreConfig, restore, restore_multi
from .embeddings import Conditions, IdentityEmbedding, RegionMask, TextEmbedding
from .metrics import EvalResult, iou, iou_gated_similarity
from .profiler import count_model, load_spec, parse_spec
from .repcontrol import MergeConfig, build_dual_model, merge_model, reparameterize
from .synth import SceneSpec, SceneStream, gen_identity, make_dataset, random_scene, render_scene
from .training import PretrainConfig, TrainConfig, pretrain_base, train_toy

__version__ = "0.1.0"
