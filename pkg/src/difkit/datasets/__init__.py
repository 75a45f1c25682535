"""Bundled data files.

``verbal_aggression.csv`` holds the public Verbal Aggression questionnaire
responses (De Boeck & Wilson, 2004): 316 respondents by 24 dichotomized
items (1 = would want to / did respond aggressively) plus a ``Gender``
column coded 0 for women (reference) and 1 for men (focal).

``nsduh_2022_recode.json`` is the recode configuration for the public
NSDUH-2022 extract (item ADDPREV, group PDEN10, trait KSSLR6MON, clusters
IREDUHIGHST2). The survey file itself is not redistributed.
"""

from importlib import resources
from pathlib import Path

from ..data import RecodeSpec
from ..irt import ItemResponseMatrix

STUDIED_VERBAL_ITEM = "S1wantCurse"

# Item sets used in the worked sensitivity example for the Wald item test.
VERBAL_ITEM_SETS = {
    "A": ("S1wantCurse", "S1WantScold"),
    "B": ("S1wantCurse", "S1WantScold", "S1WantShout"),
    "C": ("S1wantCurse", "S1WantScold", "S1WantShout", "S2WantCurse"),
    "D": None,  # the full 24-item set
}


def _resource_path(name: str) -> Path:
    with resources.as_file(resources.files(__package__) / name) as p:
        return Path(p)


def verbal_aggression_path() -> Path:
    return _resource_path("verbal_aggression.csv")


def load_verbal_aggression() -> ItemResponseMatrix:
    return ItemResponseMatrix.from_csv(
        verbal_aggression_path(), group_column="Gender"
    )


def nsduh_recode_path() -> Path:
    return _resource_path("nsduh_2022_recode.json")


def load_nsduh_recode() -> RecodeSpec:
    return RecodeSpec.from_file(nsduh_recode_path())
