"""ctfpilot: a GitOps control plane for Jeopardy-style CTF competitions.

A version-controlled directory of declarative challenge definitions is the
single source of truth; the reconciler keeps a scoreboard and an
orchestration backend converged against it, while the instancer manages
per-team challenge instances with admission limits and TTL cleanup.
"""

__version__ = "0.1.0"
