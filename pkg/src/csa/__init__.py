"""Confident Sinkhorn Allocation for semi-supervised pseudo-labelling.

Submodules
----------
dataset
    Synthetic mixtures, CSV loading, guarded label splits.
ensemble
    Bootstrapped logistic-regression ensembles.
confidence
    Welch t-test, variance and entropy confidence statistics.
sinkhorn
    Augmented optimal-transport allocation and an LP oracle.
pipeline
    Pseudo-labelling loop for CSA and baseline methods.
theory
    Monte Carlo check of the mean-estimation bound and PAC-Bayes terms.
cli
    Config-driven experiment runner.
"""
