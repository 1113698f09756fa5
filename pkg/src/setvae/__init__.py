"""Hierarchical VAE for variable-cardinality set data.

Subpackages by layer: `tensor` (autodiff substrate), `attention`
(permutation-equivariant blocks), `model` (latent hierarchy and losses),
`metrics` (set distances and population scores), `data` (synthetic corpora
and batching), `checkpoint`/`config`/`training`/`cli` (operator surface).
"""

__version__ = "0.1.0"
