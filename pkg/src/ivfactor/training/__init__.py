from .generative import marginal_loglik, random_extractor, train_generative
from .objective import (Classifier, Gradients, backward, classifier_gradients, cross_entropy_loss,
                        forward, regularizer)
from .trainer import (SCHEMES, TrainConfig, Trainer, TrainerState, TrainResult, TrainSet, build_train_set,
                      constant_lambda, exponential_lambda, random_factorized, train)

__all__ = ["marginal_loglik", "random_extractor", "train_generative", "Classifier", "Gradients", "backward",
           "classifier_gradients", "cross_entropy_loss", "forward", "regularizer", "SCHEMES", "TrainConfig",
           "Trainer", "TrainerState", "TrainResult", "TrainSet", "build_train_set", "constant_lambda",
           "exponential_lambda", "random_factorized", "train"]
