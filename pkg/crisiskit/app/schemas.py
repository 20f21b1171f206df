from __future__ import annotations

import re
from datetime import datetime, timezone
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# --- Labels -------------------------------------------------------------------

class Label(str, Enum):
    REQUEST = "Request"
    OFFER = "Offer"
    REQUEST_AND_OFFER = "Request and Offer"
    IRRELEVANT = "Irrelevant"

    @classmethod
    def parse(cls, raw: object) -> Optional["Label"]:
        """
        Lenient parse of an annotator cell: 'Request and Offer', 'RequestAndOffer',
        'request_and_offer' and 'REQUEST' all resolve. Unparseable -> None.
        """
        if isinstance(raw, Label):
            return raw
        if raw is None:
            return None
        key = re.sub(r"[^a-z]", "", str(raw).lower())
        return _LABEL_KEYS.get(key)

    @classmethod
    def ordered(cls) -> list["Label"]:
        return [cls.REQUEST, cls.OFFER, cls.REQUEST_AND_OFFER, cls.IRRELEVANT]


_LABEL_KEYS = {re.sub(r"[^a-z]", "", lbl.value.lower()): lbl for lbl in Label}
_LABEL_KEYS.update({re.sub(r"[^a-z]", "", lbl.name.lower()): lbl for lbl in Label})


class ResourceType(str, Enum):
    MONEY = "Money"
    VOLUNTEERS = "Volunteers"
    CLOTHING = "Clothing"
    SHELTER = "Shelter"
    MEDICAL_AID = "MedicalAid"
    FOOD = "Food"

    @classmethod
    def parse(cls, raw: object) -> Optional["ResourceType"]:
        if isinstance(raw, ResourceType):
            return raw
        if raw is None:
            return None
        key = re.sub(r"[^a-z]", "", str(raw).lower())
        for r in cls:
            if re.sub(r"[^a-z]", "", r.value.lower()) == key:
                return r
        return None


# --- Records ------------------------------------------------------------------

class RawRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    text: str
    label: Optional[Label] = None
    country: Optional[str] = None
    city: Optional[str] = None
    timestamp: Optional[datetime] = None

    @field_validator("id")
    @classmethod
    def _id_present(cls, v: str) -> str:
        if not v or not v.strip():
            raise ValueError("id must be non-empty")
        return v

    @field_validator("text")
    @classmethod
    def _text_present(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("text must be non-empty after trimming")
        return v

    @field_validator("label", mode="before")
    @classmethod
    def _lenient_label(cls, v):
        if v is None or v == "":
            return None
        parsed = Label.parse(v)
        if parsed is None:
            raise ValueError(f"unknown label {v!r}")
        return parsed

    @field_validator("country")
    @classmethod
    def _iso3(cls, v: Optional[str]) -> Optional[str]:
        if v is None or v == "":
            return None
        v = v.strip().upper()
        if not re.fullmatch(r"[A-Z]{3}", v):
            raise ValueError(f"country must be ISO-3166 alpha-3, got {v!r}")
        return v

    @field_validator("timestamp")
    @classmethod
    def _utc(cls, v: Optional[datetime]) -> Optional[datetime]:
        if v is None:
            return None
        if v.tzinfo is None:
            return v.replace(tzinfo=timezone.utc)
        return v.astimezone(timezone.utc)


class GeoRecord(RawRecord):
    predicted: Label
    resource: Optional[ResourceType] = None

    @field_validator("resource", mode="before")
    @classmethod
    def _lenient_resource(cls, v):
        if v is None or v == "":
            return None
        parsed = ResourceType.parse(v)
        if parsed is None:
            raise ValueError(f"unknown resource type {v!r}")
        return parsed

    @model_validator(mode="after")
    def _resource_only_on_actionable(self) -> "GeoRecord":
        if self.resource is not None and self.predicted == Label.IRRELEVANT:
            raise ValueError("resource tag only allowed on Request/Offer records")
        return self


class AgreedRecord(BaseModel):
    """A row kept by the agreement filter; text is joined in when a corpus is supplied."""

    id: str
    label: Label
    text: Optional[str] = None
