"""Fixed label set shared by every stage of the pipeline."""

CATEGORIES = ("person", "bicycle", "car", "motorbike", "bus", "truck", "traffic light")

# COCO category ids, also used as the MOT ``class`` column.
COCO_IDS = {
    "person": 1,
    "bicycle": 2,
    "car": 3,
    "motorbike": 4,
    "bus": 6,
    "truck": 8,
    "traffic light": 10,
}
COCO_NAMES = {v: k for k, v in COCO_IDS.items()}

MOTOR_VEHICLES = frozenset({"car", "bus", "truck", "motorbike"})


def check_category(name):
    if name not in COCO_IDS:
        raise ValueError(f"unknown category {name!r}; expected one of {CATEGORIES}")
    return name


def category_from_id(cid):
    try:
        return COCO_NAMES[int(cid)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown category id {cid!r}") from None


def label_token(name):
    """Single-token form of a label for whitespace-delimited files."""
    return name.replace(" ", "_")


def parse_label(token):
    return check_category(token.replace("_", " "))
