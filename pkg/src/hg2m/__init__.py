"""Heterogeneous-graph to MLP knowledge distillation."""
from .hetgraph import HeteroGraph, LabeledTarget, Relation, SplitSpec, load_graph, save_graph
from .metapath import MetaPath, enumerate_pairs, homophily
from .teacher import RSAGE, TeacherConfig, train_teacher
from .distill import StudentConfig, select_reliable, train_student

__version__ = "0.1.0"

__all__ = [
    "HeteroGraph", "LabeledTarget", "Relation", "SplitSpec", "load_graph", "save_graph",
    "MetaPath", "enumerate_pairs", "homophily", "RSAGE", "TeacherConfig", "train_teacher",
    "StudentConfig", "select_reliable", "train_student",
]
