"""Termination and memory-safety prover for a mini-LLVM IR fragment.

The pipeline: parse the textual IR (``ir``), build a symbolic execution
graph with inferred linked-list invariants (``symexec``, ``seg``), extract
an integer transition system from the graph's cycles and search for linear
ranking functions (``its``).  A byte-level concrete interpreter plus a
representation checker (``concrete``) serves as the soundness oracle in
the test suite.
"""

__version__ = "0.1.0"
