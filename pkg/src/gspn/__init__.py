"""Graph-induced sum-product networks: tractable probabilistic models over graphs."""

from .graph import (AttributeSchema, Categorical, Continuous, Dataset, DatasetError, Graph,
                    apply_missing_mask, in_neighbors, load_dataset, save_dataset,
                    synth_community_graphs)
from .model import (GspnConfig, GspnParams, LayerPosteriors, aggregate_prior, forward_pass,
                    load_checkpoint, pseudo_log_likelihood, save_checkpoint, shortcut_emission,
                    train_unsupervised, vertex_embeddings)
from .readout import ReadoutParams, graph_predict, readout_prior, train_supervised
from .queries import impute, missing_nll, perturbation_query

__version__ = "0.1.0"
