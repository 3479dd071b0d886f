# Licensed under the Apache License, Version 2.0 (the 'License');
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at:
#
# https://www.apache.org/licenses/LICENSE-2.0

"""
Models for verifiable-reward training data

Models:
-------
GroundTruth - the typed reference answer of one question
Sample - one verifiable question-answer record

Attributes:
-----------
question (string) - the textual part of the query
images (list) - opaque image references, empty for text-only samples
caption (string) - optional textual description of the images
category (ImageCategory) - mathgeo, chart, table, aigc or none
truth (GroundTruth) - what a correct answer must match
modality (Modality) - text or multimodal
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

from verirl.mathexpr import ParseError, parse_math
from verirl.verifier import DEFAULT_OPTIONS, reduce_choice

logger = logging.getLogger("verirl")


class DataValidationError(Exception):
    """Used for any data validation errors when deserializing"""


class SchemaError(DataValidationError):
    """A record does not match the expected schema"""

    def __init__(self, message: str, field_name: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.field = field_name
        self.line = line
        super().__init__(message)

    def at_line(self, line: int) -> "SchemaError":
        """Returns the same error attributed to a line number"""
        return SchemaError(self.message, self.field, line)

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        what = f"[{self.field}] " if self.field else ""
        return f"{where}{what}{self.message}"


class ConfigError(DataValidationError):
    """Invalid weights or hyperparameters"""


class PlanError(DataValidationError):
    """A curriculum plan violates phase ordering or transform rules"""


class MissingCaption(DataValidationError):
    """Caption augmentation requested for a sample without a caption"""


class EmptyPhaseData(DataValidationError):
    """A phase filter selected no samples"""


class DatasetIOError(Exception):
    """A dataset or report file could not be read or written"""


class ImageCategory(Enum):
    """Image taxonomy carried as dataset metadata"""
    NONE = "none"
    MATHGEO = "mathgeo"
    CHART = "chart"
    TABLE = "table"
    AIGC = "aigc"


class Modality(Enum):
    """Which observation channels a sample carries"""
    TEXT = "text"
    MULTIMODAL = "multimodal"


class TruthType(Enum):
    """Task family, chosen by the format of the ground truth"""
    MATH = "math"
    STRING = "string"
    CHOICE = "choice"


@dataclass(frozen=True)
class GroundTruth:
    """Typed reference answer"""
    kind: TruthType
    value: str
    options: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind is TruthType.MATH:
            try:
                parse_math(self.value)
            except ParseError as error:
                raise SchemaError(f"Math truth does not parse: {error}", "truth") from error
        elif self.kind is TruthType.CHOICE:
            options = tuple(o.strip().upper() for o in (self.options or DEFAULT_OPTIONS))
            label = reduce_choice(self.value)
            if label is None or label not in options:
                raise SchemaError(
                    f"Choice truth '{self.value}' is not one of {list(options)}", "truth"
                )
            object.__setattr__(self, "options", options)
            object.__setattr__(self, "value", label)

    @classmethod
    def from_record(cls, truth, truth_type, options=None) -> "GroundTruth":
        """Builds a GroundTruth from the JSON fields shared by every schema"""
        try:
            kind = TruthType(truth_type)
        except ValueError as error:
            raise SchemaError(f"Invalid truth_type: {truth_type!r}", "truth_type") from error
        if not isinstance(truth, str) or not truth.strip():
            raise SchemaError("Invalid truth: expected a non-empty string", "truth")
        if options is not None and (
            not isinstance(options, list) or not all(isinstance(o, str) for o in options)
        ):
            raise SchemaError("Invalid options: expected a list of strings", "options")
        return cls(kind, truth, tuple(options or ()))


@dataclass(frozen=True)
class Sample:
    """Class that represents one verifiable question-answer record"""
    id: str
    question: str
    truth: GroundTruth
    images: Tuple[str, ...] = ()
    caption: Optional[str] = None
    category: ImageCategory = ImageCategory.NONE
    modality: Modality = Modality.TEXT
    augmented: bool = field(default=False, compare=True)

    def __post_init__(self):
        if self.modality is Modality.TEXT and self.images:
            raise SchemaError("Text-only samples cannot carry images", "images")
        if self.modality is Modality.MULTIMODAL and not self.images:
            raise SchemaError("Multimodal samples need at least one image", "images")
        if self.caption is not None and self.modality is not Modality.MULTIMODAL:
            raise SchemaError("Only multimodal samples can carry a caption", "caption")

    def __repr__(self):
        return f"<Sample {self.id} modality=[{self.modality.value}]>"

    @property
    def is_multimodal(self) -> bool:
        """True when the sample carries images"""
        return self.modality is Modality.MULTIMODAL

    def evolve(self, **changes) -> "Sample":
        """Returns a copy with some fields changed and invariants re-checked"""
        return replace(self, **changes)

    def serialize(self) -> dict:
        """Serializes a Sample into a dictionary"""
        data = {
            "id": self.id,
            "question": self.question,
            "images": list(self.images),
            "caption": self.caption,
            "category": None if self.category is ImageCategory.NONE else self.category.value,
            "truth": self.truth.value,
            "truth_type": self.truth.kind.value,
            "options": list(self.truth.options) if self.truth.kind is TruthType.CHOICE else None,
            "modality": self.modality.value,
        }
        if self.augmented:
            data["augmented"] = True
        return data

    @classmethod
    def deserialize(cls, data: dict) -> "Sample":
        """Deserializes a Sample from a dictionary"""
        if not isinstance(data, dict):
            raise SchemaError("Invalid sample: body of record contained bad or no data")
        try:
            sample_id = data["id"]
            question = data["question"]
            modality = Modality(data.get("modality") or ("multimodal" if data.get("images") else "text"))
        except KeyError as error:
            raise SchemaError("Invalid sample: missing " + error.args[0], error.args[0]) from error
        except ValueError as error:
            raise SchemaError(f"Invalid modality: {data.get('modality')!r}", "modality") from error
        if not isinstance(sample_id, str) or not sample_id:
            raise SchemaError("Invalid type for [id]: " + str(type(sample_id)), "id")
        if not isinstance(question, str):
            raise SchemaError("Invalid type for [question]: " + str(type(question)), "question")
        images = data.get("images") or []
        if not isinstance(images, list) or not all(isinstance(i, str) for i in images):
            raise SchemaError("Invalid images: expected a list of strings", "images")
        caption = data.get("caption")
        if caption is not None and not isinstance(caption, str):
            raise SchemaError("Invalid type for [caption]: " + str(type(caption)), "caption")
        try:
            category = cls._category(data.get("category"), modality)
        except ValueError as error:
            raise SchemaError(f"Invalid category: {data.get('category')!r}", "category") from error
        if "truth" not in data or "truth_type" not in data:
            missing = "truth" if "truth" not in data else "truth_type"
            raise SchemaError("Invalid sample: missing " + missing, missing)
        truth = GroundTruth.from_record(data["truth"], data["truth_type"], data.get("options"))
        augmented = data.get("augmented", False)
        if not isinstance(augmented, bool):
            raise SchemaError("Invalid type for boolean [augmented]: " + str(type(augmented)), "augmented")
        return cls(
            id=sample_id,
            question=question,
            truth=truth,
            images=tuple(images),
            caption=caption,
            category=category,
            modality=modality,
            augmented=augmented,
        )

    @staticmethod
    def _category(value, modality: Modality) -> ImageCategory:
        if value is None:
            # Uncategorised images default to aigc
            return ImageCategory.AIGC if modality is Modality.MULTIMODAL else ImageCategory.NONE
        return ImageCategory(value)
