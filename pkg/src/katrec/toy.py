"""Paths to the bundled synthetic fixture (20 users, 15 items, 3 relations, 40 triplets)."""

from importlib import resources

from .config import toy_config
from .data import load_dataset


def toy_paths():
    root = resources.files("katrec") / "data" / "toy"
    return str(root / "interactions.txt"), str(root / "triplets.tsv")


def load_toy(config=None):
    config = config or toy_config()
    inter, trip = toy_paths()
    return load_dataset(inter, trip, config.min_interactions, config.min_entity_occurrences,
                        config.min_relation_occurrences)
