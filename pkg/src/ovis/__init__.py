"""Open-vocabulary visual instance search engine.

Pipeline: subword tokenization -> joint visual-semantic encoding ->
precomputed instance-token similarity index -> ranked, localized search
results, with detection-style evaluation and error decomposition.
"""

__version__ = "0.1.0"
