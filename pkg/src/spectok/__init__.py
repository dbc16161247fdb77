"""spectok: CPU-only audio tokenization and static-embedding classification.

Pipeline stages: Mel-spectrogram frames -> row normalization -> PCA ->
K-means codebook tokens -> skip-gram embeddings -> windowed averaging ->
lightweight classifier heads, plus a student-teacher distillation variant
and an inference-timing benchmark.
"""

__version__ = "0.1.0"
