from .forest import ForestModel, ForestParams, Tree, build_tree, train_forest
from .knn import knn_classify
from .metrics import EvalResult, accuracy, confusion_matrix, macro_f1, mean_std
from .vote import flow_majority_vote, flow_predictions

__all__ = [
    "EvalResult", "ForestModel", "ForestParams", "Tree", "accuracy", "build_tree", "confusion_matrix",
    "flow_majority_vote", "flow_predictions", "knn_classify", "macro_f1", "mean_std", "train_forest",
]
