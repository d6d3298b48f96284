"""Visual-aware text encoding: shared text/image embedding, top-m image
retrieval, attention fusion of retrieved images into a transformer encoder,
and task heads on top, all on a small numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict, load_config
from .data import Corpus, SyntheticConfig, Vocab, generate_synthetic_corpus, load_corpus, save_corpus
from .embedding import (EmbeddingConfig, EmbeddingModel, EmbeddingTrainConfig, encode_image, encode_text,
                        mine_hard_negative, train_embedding, triplet_loss, weldon_pool)
from .errors import VisAwareError
from .fusion import (FusedSequence, FusionConfig, attend_fuse, encode_and_fuse, residual_norm_fuse,
                     transformer_encode)
from .gradcheck import GradCheckReport, grad_check
from .heads import classify_pair, greedy_decode, tag_sequence
from .retrieval import ImageIndex, RetrievalResult, build_index, recall_at_k, retrieve_top_m
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
