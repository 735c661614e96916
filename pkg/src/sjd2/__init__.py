"""Speculative Jacobi-denoising decoding for autoregressive token models.

A trainable toy causal transformer, noise-augmented fine-tuning, four
decoding engines (sequential, Jacobi fixed-point, speculative Jacobi, and
speculative Jacobi-denoising), synthetic corpora, and a benchmark harness.
"""

__version__ = "0.1.0"

from .schedules import (CLEAN, NoiseCoeffs, TimestepGrid, build_schedule,
                        denoise_step, denoise_coefficients, perturb)
from .embedding_space import (EmbeddingTable, compute_stats, normalize,
                              denormalize, token_to_normalized_embedding,
                              nearest_token)
from .model import (ModelConfig, ToyModel, ForwardInput, KVCache, forward,
                    build_attention_mask, timestep_encoding, bos_token,
                    pad_token)
from .checkpoint import save_checkpoint, load_checkpoint, fresh_model
from .training import (NoisePlan, sample_noise_plan, apply_noise_plan,
                       build_batch, loss_and_grads, cross_entropy, AdamW,
                       train_model)
from .decoding import (DecodeConfig, DecodeResult, JacobiWindow, WindowSlot,
                       decode_session, init_window, verify_prefix, refine,
                       slide_and_refill, write_trace, read_trace,
                       replay_accepted)
from .bench_metrics import (RunReport, step_compression, tv_distance,
                            token_change_trajectory, make_report,
                            write_report, read_report)
from .corpus import (MarkovSource, GridCorpusSpec, random_chain, gen_markov,
                     gen_grid, write_corpus, read_corpus)

__all__ = [name for name in dir() if not name.startswith("_")]
