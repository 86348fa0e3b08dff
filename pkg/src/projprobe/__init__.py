"""Toy vision-language models for probing how much attack surface the
vision-language projector adds on top of the visual encoder."""

from .attacks import AdversarialResult, AttackConfig, cw_l2, fgsm, mi_fgsm, pgd_linf, run_attack
from .data import SyntheticVQADataset, make_synthetic_vqa
from .errors import (ConfigurationError, NumericalError, ProjProbeError, RegistryLookupError,
                     TrainingError, ValidationError)
from .harness import (ExperimentSpec, ReportTable, RunRecord, aggregate_runs, derive_seed,
                      evaluate_clean, run_attack_experiment, security_verdict, sweep)
from .losses import Objective, SurrogateBundle, TCPConfig, loss_tcp, loss_ve, loss_vlp
from .registry import Registry
from .surrogates import (ScenarioSpec, TrainConfig, resolve_scenario, train_compressed_surrogate,
                         train_uncompressed_surrogate)

__version__ = "0.1.0"
