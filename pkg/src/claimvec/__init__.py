"""claimvec: patient-level code embeddings from insurance claims, with
prospective risk-score modeling and group-level evaluation."""

__version__ = "0.1.0"
