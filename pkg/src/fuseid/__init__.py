"""Face-aided speaker identification.

Paired face/voice embeddings train a two-branch fusion network; fused
features (optionally with the face input zeroed) feed a one-vs-one
polynomial-kernel SVM.
"""
from .embedding_store import (EmbeddingRecord, PairedSample, SynthConfig, generate_synthetic,
                              pair_samples, read_embeddings, write_embeddings)
from .evaluate import EvalReport, compare_conditions, confusion_matrix, top1_accuracy
from .svm import KernelSpec, SvmModel, predict, train_binary, train_multiclass
from .two_branch import (ArchitectureSpec, TrainConfig, TwoBranchModel, build_model,
                         extract_features, load_model, save_model, train)

__version__ = "0.1.0"
