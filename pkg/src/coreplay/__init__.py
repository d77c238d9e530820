"""Noise-tolerant coreset replay for class-incremental continual learning.

Submodules
----------
linalg    dense numeric kernel (Jacobi eigensolver, seeded k-means++)
data      dataset construction, noise injection, experience streaming
model     small MLP classifier with explicit forward/backward passes
coreset   gradient dissimilarities, facility location, spectral clustering
bounds    convergence-bound evaluators over measured gradient spectra
continual two-phase class-incremental training loop and strategy zoo
metrics   accuracy matrix, average final accuracy, forgetting, purity
cli       experiment orchestration and result tables
"""

__version__ = "0.1.0"
