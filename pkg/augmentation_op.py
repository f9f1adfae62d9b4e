from enum import Enum


class AugmentationOp(Enum):
    HORIZONTAL_FLIP = 0
    GAUSSIAN_BLUR   = 1
    COLOR_JITTER    = 2
    SHEAR           = 3
    ROTATION        = 4
    RANDOM_NOISE    = 5
    RANDOM_CROP     = 6

    @property
    def isGeometric(self) -> bool:
        return self in (AugmentationOp.HORIZONTAL_FLIP, AugmentationOp.SHEAR, AugmentationOp.ROTATION, AugmentationOp.RANDOM_CROP)

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_string(cls, string: str):
        try:
            return cls[string.strip().upper()]
        except KeyError:
            raise ValueError(f"{string} is not a valid {cls.__name__}")
