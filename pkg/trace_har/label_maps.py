"""
Dataset label inventories mapped onto the shared activity labels
"""
import logging
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional

import yaml

from .errors import ConfigError, UnmappedLabelError
from .schemas import LabelMap

logger = logging.getLogger(__name__)

ARUBA = {
    "Relax": "Relax",
    "Meal Preparation": "Cook",
    "Enter Home": "Enter_Home",
    "Leave Home": "Leave_Home",
    "Sleeping": "Sleep",
    "Eating": "Eat",
    "Work": "Work",
    "Bed to Toilet": "Bed_to_Toilet",
    "Wash Dishes": "Work",
    "Housekeeping": "Work",
    "Resperate": "Other",
    "Other": "Other",
}

MILAN = {
    "Kitchen Activity": "Cook",
    "Guest Bathroom": "Use_Bathroom",
    "Read": "Relax",
    "Master Bathroom": "Use_Bathroom",
    "Leave Home": "Leave_Home",
    "Master Bedroom Activity": "Other",
    "Watch TV": "Relax",
    "Sleep": "Sleep",
    "Bed to Toilet": "Bed_to_Toilet",
    "Desk Activity": "Work",
    "Morning Meds": "Take_Medicine",
    "Chores": "Work",
    "Dining Room Activity": "Eat",
    "Evening Meds": "Take_Medicine",
    "Meditate": "Other",
    "Other": "Other",
}

KYOTO7 = {
    "Meal Preparation": "Cook",
    "R1 Work": "Work",
    "R1 Personal Hygiene": "Personal_Hygiene",
    "R2 Work": "Work",
    "R2 Bed to Toilet": "Bed_to_Toilet",
    "R2 Personal Hygiene": "Personal_Hygiene",
    "R1 Sleep": "Sleep",
    "R2 Sleep": "Sleep",
    "R1 Bed to Toilet": "Bed_to_Toilet",
    "Watch TV": "Relax",
    "Study": "Other",
    "Clean": "Work",
    "Wash Bathtub": "Other",
    "Other": "Other",
}

# spellings found in the raw annotation files
_ALIASES = {
    "aruba": {"Respirate": "Resperate"},
    "milan": {"Dining Rm Activity": "Dining Room Activity", "Eve Meds": "Evening Meds"},
    "kyoto7": {},
}

ORIGINAL_LABELS: Dict[str, List[str]] = {
    "aruba": list(ARUBA),
    "milan": list(MILAN),
    "kyoto7": list(KYOTO7),
}


def _builtin(name: str, table: Dict[str, str]) -> LabelMap:
    mapping = dict(table)
    for alias, original in _ALIASES[name].items():
        mapping[alias] = table[original]
    return LabelMap(name=name, mapping=mapping)


BUILTIN_MAPS: Dict[str, LabelMap] = {
    "aruba": _builtin("aruba", ARUBA),
    "milan": _builtin("milan", MILAN),
    "kyoto7": _builtin("kyoto7", KYOTO7),
}


def _fold(label: str) -> str:
    return re.sub(r"[\s_\-]+", " ", label.strip()).lower()


def label_mapper(label_map: LabelMap) -> Callable[[str], str]:
    """Lookup that also accepts underscore, dash and case variants of the keys"""
    folded = {_fold(key): value for key, value in label_map.mapping.items()}

    def lookup(label: str) -> str:
        if label in label_map.mapping:
            return label_map.mapping[label]
        value = folded.get(_fold(label))
        if value is None:
            raise UnmappedLabelError(label)
        return value

    return lookup


def map_label(label: str, label_map: LabelMap) -> str:
    return label_mapper(label_map)(label)


def load_label_map(name_or_path: Optional[str]) -> Optional[LabelMap]:
    """Built-in map by name (aruba, milan, kyoto7) or a YAML file.

    YAML form: `{name: ..., mapping: {original: shared}}` or a bare mapping.
    """
    if name_or_path is None:
        return None
    builtin = BUILTIN_MAPS.get(str(name_or_path).lower())
    if builtin is not None:
        return builtin

    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(
            f"label map '{name_or_path}' is neither a built-in map nor a file",
            hint=f"built-in maps: {', '.join(sorted(BUILTIN_MAPS))}",
        )
    try:
        with open(path, encoding="utf-8") as handle:
            document = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")

    mapping = document.get("mapping", document) if isinstance(document, dict) else None
    if not isinstance(mapping, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in mapping.items()):
        raise ConfigError(f"{path}: label map must be a mapping of label to label")
    name = document.get("name", path.stem) if "mapping" in document else path.stem
    logger.info(f"Loaded label map '{name}' with {len(mapping)} entries")
    return LabelMap(name=str(name), mapping=mapping)
