"""efuf: score caption objects for image relevance, curate unlearning datasets
by thresholding, finetune a toy multimodal captioner with a three-part
gradient-ascent objective, and evaluate hallucination and generation quality.
"""

__version__ = "0.1.0"
