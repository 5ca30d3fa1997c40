"""Class order used by every artifact (index = label id)."""

CLASS_NAMES = ("fillings", "cavity", "implant", "impacted")
NUM_CLASSES = len(CLASS_NAMES)
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}


def label_index(name):
    try:
        return CLASS_INDEX[name]
    except KeyError:
        raise KeyError(name) from None
