from __future__ import annotations

from pydantic import BaseModel, Field


class UserIn(BaseModel):
    address: str = Field(..., min_length=1)
    balance: int | None = Field(None, ge=0)


class UserOut(BaseModel):
    address: str
    reputation: float
    models_alloc_count: int
    total_review: float
    balance: int


class ModelIn(BaseModel):
    owner: str
    package_b64: str = Field(..., description="ModelPackage bytes, base64")
    description: str | None = None


class ModelOut(BaseModel):
    owner: str
    cid: str
    application: str
    environment_details: list[int]
    description: str
    reputation: float
    allocation_count: int
    total_model_review: float


class AllocateIn(BaseModel):
    requester: str
    application: str
    desired_details: list[int]
    weights: list[str] | None = Field(None, description="fractions or decimals, e.g. '1/2'")
    min_model_reputation: float = Field(0.0, ge=0, le=1)
    min_owner_reputation: float = Field(0.0, ge=0, le=1)
    count: int = Field(1, ge=1)
    price: int = Field(0, ge=0)


class AllocatedModel(BaseModel):
    allocation_id: int
    cid: str
    owner: str
    qos: float


class AllocateOut(BaseModel):
    allocations: list[AllocatedModel]
    short: bool


class ReviewIn(BaseModel):
    requester: str
    cid: str
    review: float = Field(..., ge=0, le=1)


class ReviewOut(BaseModel):
    cid: str
    owner_reputation: float
    model_reputation: float


class VerifyOut(BaseModel):
    ok: bool
    first_corrupt_index: int | None
    length: int


class RunIn(BaseModel):
    scenario: str = Field(..., description="scenario file text")
    base_dir: str = "."
    resume: bool = True


class RunStatus(BaseModel):
    id: int
    name: str
    status: str  # queued | running | complete | failed
    error: str | None = None
    aggregate: str | None = None
    final_lengths: list[float] = []


class ErrorOut(BaseModel):
    error: str
    kind: str
    exit_code: int
