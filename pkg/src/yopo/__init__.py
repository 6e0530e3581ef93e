"""YOPO-m-n adversarial training: networks as dynamical systems, frozen-costate adversaries, and diagnostics."""
from .adversary import AdversaryConfig, PerturbationBall, pgd_attack, yopo_attack
from .dynsys import NetworkSpec, Params, forward, init_params
from .errors import FormatError, NumericError, UsageError, YopoError
from .hamiltonian import backward, grad_eta, grad_theta, sweep
from .trainer import EvalConfig, TrainConfig, evaluate, train, train_step

__version__ = "0.1.0"
