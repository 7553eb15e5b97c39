"""Audit toolkit for gradient-inversion leakage in federated learning.

Modules: ``ingest`` (datasets, priors, client shards), ``model`` (small BN
networks in pure functional torch), ``fl_sim`` (FedAvg with recorded
updates), ``defense`` (DP mechanisms), ``attack`` (epoch-wise inversion),
``metrics`` (SSIM, RDLV, IIP, bootstrap) and ``report_cli`` (command line).
"""

__version__ = "0.1.0"
