"""recten: a compiler and interpreter for recurrent-tensor programs.

Programs define tensors over symbolic iteration domains by recurrence
equations with symbolic indexing. The pipeline builds a dependence graph,
applies whole-program transformations, computes a verified schedule with
explicit memory management, and interprets the generated AST against a
simulated two-tier memory, checked against a demand-driven oracle.
"""

__version__ = "0.1.0"
