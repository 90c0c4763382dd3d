"""Claims data model: CSV parsing, cohort inclusion rules, patient documents.

Claims and member files are plain UTF-8 CSV (formats documented in the
README). Parsing keeps code strings verbatim: no trimming of dots,
no rollup, no normalization. All functions here are pure and safe to
call concurrently on disjoint inputs.
"""

from __future__ import annotations

import csv
import enum
import json
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from decimal import Decimal, InvalidOperation
from pathlib import Path


class CodeSystem(enum.Enum):
    ICD9 = "ICD9"
    ICD10 = "ICD10"
    CPT = "CPT"
    NDC = "NDC"


# Rank used for same-date tie-breaks; follows declaration order.
_SYSTEM_RANK = {s: i for i, s in enumerate(CodeSystem)}


class CareSetting(enum.Enum):
    INPATIENT = "inpatient"
    OUTPATIENT = "outpatient"
    ED = "ed"
    PHARMACY = "pharmacy"
    SPECIALTY_RX = "specialty_rx"


class Sex(enum.Enum):
    MALE = "male"
    FEMALE = "female"


CLAIMS_COLUMNS = ["patient_id", "service_date", "code_system", "code", "allowed_cost", "setting"]
MEMBERS_COLUMNS = ["patient_id", "birth_year", "sex", "zip3_black_pct", "enrollment"]


class ParseError(ValueError):
    """Raised for malformed rows; carries file, line number and field name."""

    def __init__(self, path, line_no: int, field: str, message: str):
        self.path = str(path)
        self.line_no = line_no
        self.field = field
        super().__init__(f"{self.path}:{line_no}: field '{field}': {message}")


@dataclass(frozen=True, slots=True)
class ClaimRecord:
    """One billed event."""

    patient_id: str
    service_date: date
    code_system: CodeSystem
    code: str
    allowed_cost: Decimal
    setting: CareSetting

    def __post_init__(self):
        if self.allowed_cost < 0:
            raise ValueError(f"allowed_cost must be >= 0, got {self.allowed_cost}")
        if not self.code or any(ch.isspace() for ch in self.code):
            raise ValueError(f"code must be non-empty with no whitespace, got {self.code!r}")


@dataclass(frozen=True, slots=True)
class MemberRecord:
    """Demographics and per-year enrollment for one patient."""

    patient_id: str
    birth_year: int
    sex: Sex
    zip3_black_pct: float
    enrollment_months: dict[int, int]

    def __post_init__(self):
        if not 0.0 <= self.zip3_black_pct <= 1.0:
            raise ValueError(f"zip3_black_pct must be in [0, 1], got {self.zip3_black_pct}")
        for year, months in self.enrollment_months.items():
            if not 0 <= months <= 12:
                raise ValueError(f"enrollment months for {year} must be in [0, 12], got {months}")


@dataclass(slots=True)
class PatientDocument:
    """One patient's chronologically ordered base-year code sequence.

    ``claims`` retains the base-year claim records (the ones that produced
    ``tokens``) for downstream featurization; ``cost_by_year`` sums allowed
    cost over all of the patient's claims, any year.
    """

    patient_id: str
    tokens: list[str]
    member: MemberRecord
    cost_by_year: dict[int, Decimal]
    claims: list[ClaimRecord]


@dataclass(slots=True)
class Cohort:
    base_year: int
    target_year: int
    documents: list[PatientDocument]

    def __len__(self) -> int:
        return len(self.documents)

    def patient_ids(self) -> list[str]:
        return [d.patient_id for d in self.documents]


def _parse_cost(text: str) -> Decimal:
    cost = Decimal(text)
    exponent = cost.as_tuple().exponent
    if isinstance(exponent, int) and exponent < -2:
        raise ValueError(f"more than 2 fraction digits: {text!r}")
    if cost < 0:
        raise ValueError(f"negative cost: {text!r}")
    return cost


def parse_claims(path) -> list[ClaimRecord]:
    """Parse a claims CSV into records, preserving file order.

    Raises ParseError naming the line number and offending field on any
    malformed row.
    """
    claims: list[ClaimRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CLAIMS_COLUMNS:
            raise ParseError(path, 1, "header", f"expected {CLAIMS_COLUMNS}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CLAIMS_COLUMNS):
                raise ParseError(path, line_no, "row", f"expected {len(CLAIMS_COLUMNS)} fields, got {len(row)}")
            pid, date_text, system_text, code, cost_text, setting_text = row
            if not pid:
                raise ParseError(path, line_no, "patient_id", "empty")
            try:
                service_date = date.fromisoformat(date_text)
            except ValueError as exc:
                raise ParseError(path, line_no, "service_date", str(exc)) from exc
            try:
                system = CodeSystem(system_text)
            except ValueError as exc:
                raise ParseError(path, line_no, "code_system", f"unknown code system {system_text!r}") from exc
            try:
                cost = _parse_cost(cost_text)
            except (InvalidOperation, ValueError) as exc:
                raise ParseError(path, line_no, "allowed_cost", str(exc)) from exc
            try:
                setting = CareSetting(setting_text)
            except ValueError as exc:
                raise ParseError(path, line_no, "setting", f"unknown setting {setting_text!r}") from exc
            try:
                claims.append(ClaimRecord(pid, service_date, system, code, cost, setting))
            except ValueError as exc:
                raise ParseError(path, line_no, "code", str(exc)) from exc
    return claims


def write_claims(claims, path) -> None:
    """Write claims to CSV in the format parse_claims accepts (lossless round-trip)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CLAIMS_COLUMNS)
        for c in claims:
            writer.writerow([
                c.patient_id,
                c.service_date.isoformat(),
                c.code_system.value,
                c.code,
                str(c.allowed_cost),
                c.setting.value,
            ])


def _parse_enrollment(text: str) -> dict[int, int]:
    months: dict[int, int] = {}
    if not text:
        return months
    for chunk in text.split(";"):
        year_text, _, month_text = chunk.partition(":")
        year = int(year_text)
        value = int(month_text)
        if not 0 <= value <= 12:
            raise ValueError(f"months for {year} out of [0, 12]: {value}")
        if year in months:
            raise ValueError(f"duplicate year {year} in enrollment")
        months[year] = value
    return months


def parse_members(path) -> list[MemberRecord]:
    """Parse a members CSV. Duplicate patient ids are an error."""
    members: list[MemberRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MEMBERS_COLUMNS:
            raise ParseError(path, 1, "header", f"expected {MEMBERS_COLUMNS}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(MEMBERS_COLUMNS):
                raise ParseError(path, line_no, "row", f"expected {len(MEMBERS_COLUMNS)} fields, got {len(row)}")
            pid, birth_text, sex_text, pct_text, enroll_text = row
            if pid in seen:
                raise ParseError(path, line_no, "patient_id", f"duplicate patient id {pid!r}")
            seen.add(pid)
            try:
                birth_year = int(birth_text)
            except ValueError as exc:
                raise ParseError(path, line_no, "birth_year", str(exc)) from exc
            sex_key = sex_text.strip().upper()
            if sex_key == "F":
                sex = Sex.FEMALE
            elif sex_key == "M":
                sex = Sex.MALE
            else:
                raise ParseError(path, line_no, "sex", f"expected M or F, got {sex_text!r}")
            try:
                pct = float(pct_text)
            except ValueError as exc:
                raise ParseError(path, line_no, "zip3_black_pct", str(exc)) from exc
            try:
                enrollment = _parse_enrollment(enroll_text)
                members.append(MemberRecord(pid, birth_year, sex, pct, enrollment))
            except ValueError as exc:
                field = "zip3_black_pct" if "zip3" in str(exc) else "enrollment"
                raise ParseError(path, line_no, field, str(exc)) from exc
    return members


def write_members(members, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MEMBERS_COLUMNS)
        for m in members:
            enroll = ";".join(f"{y}:{m.enrollment_months[y]}" for y in sorted(m.enrollment_months))
            writer.writerow([
                m.patient_id,
                m.birth_year,
                "F" if m.sex is Sex.FEMALE else "M",
                f"{m.zip3_black_pct:.4f}",
                enroll,
            ])


def build_cohort(claims, members, base_year: int, target_year: int) -> Cohort:
    """Apply inclusion rules and assemble one document per included patient.

    Inclusion requires at least one enrollment month and at least one claim
    in both the base and the target year. Tokens are the base-year codes
    sorted by (service_date, code system rank, code, input order), which
    makes the sequence deterministic for same-day claims.
    """
    by_id: dict[str, MemberRecord] = {}
    for m in members:
        if m.patient_id in by_id:
            raise ValueError(f"duplicate member record for patient {m.patient_id!r}")
        by_id[m.patient_id] = m

    unknown = sorted({c.patient_id for c in claims if c.patient_id not in by_id})
    if unknown:
        shown = ", ".join(unknown[:20])
        suffix = "" if len(unknown) <= 20 else f" (and {len(unknown) - 20} more)"
        raise ValueError(f"claims reference unknown patient ids: {shown}{suffix}")

    claims_by_patient: dict[str, list[tuple[ClaimRecord, int]]] = defaultdict(list)
    for idx, c in enumerate(claims):
        claims_by_patient[c.patient_id].append((c, idx))

    documents: list[PatientDocument] = []
    for pid in sorted(by_id):
        member = by_id[pid]
        if member.enrollment_months.get(base_year, 0) < 1:
            continue
        if member.enrollment_months.get(target_year, 0) < 1:
            continue
        patient_claims = claims_by_patient.get(pid, [])
        years = {c.service_date.year for c, _ in patient_claims}
        if base_year not in years or target_year not in years:
            continue
        cost_by_year: dict[int, Decimal] = defaultdict(lambda: Decimal("0"))
        for c, _ in patient_claims:
            cost_by_year[c.service_date.year] += c.allowed_cost
        base_claims = [(c, i) for c, i in patient_claims if c.service_date.year == base_year]
        base_claims.sort(key=lambda ci: (ci[0].service_date, _SYSTEM_RANK[ci[0].code_system], ci[0].code, ci[1]))
        ordered = [c for c, _ in base_claims]
        documents.append(PatientDocument(
            patient_id=pid,
            tokens=[c.code for c in ordered],
            member=member,
            cost_by_year=dict(cost_by_year),
            claims=ordered,
        ))
    return Cohort(base_year=base_year, target_year=target_year, documents=documents)


def _document_to_dict(doc: PatientDocument) -> dict:
    m = doc.member
    return {
        "patient_id": doc.patient_id,
        "tokens": doc.tokens,
        "birth_year": m.birth_year,
        "sex": m.sex.value,
        "zip3_black_pct": m.zip3_black_pct,
        "enrollment_months": {str(y): v for y, v in sorted(m.enrollment_months.items())},
        "cost_by_year": {str(y): str(v) for y, v in sorted(doc.cost_by_year.items())},
        "claims": [
            {
                "service_date": c.service_date.isoformat(),
                "code_system": c.code_system.value,
                "code": c.code,
                "allowed_cost": str(c.allowed_cost),
                "setting": c.setting.value,
            }
            for c in doc.claims
        ],
    }


def _document_from_dict(pid_data: dict) -> PatientDocument:
    member = MemberRecord(
        patient_id=pid_data["patient_id"],
        birth_year=pid_data["birth_year"],
        sex=Sex(pid_data["sex"]),
        zip3_black_pct=pid_data["zip3_black_pct"],
        enrollment_months={int(y): v for y, v in pid_data["enrollment_months"].items()},
    )
    claims = [
        ClaimRecord(
            patient_id=pid_data["patient_id"],
            service_date=date.fromisoformat(c["service_date"]),
            code_system=CodeSystem(c["code_system"]),
            code=c["code"],
            allowed_cost=Decimal(c["allowed_cost"]),
            setting=CareSetting(c["setting"]),
        )
        for c in pid_data["claims"]
    ]
    return PatientDocument(
        patient_id=pid_data["patient_id"],
        tokens=list(pid_data["tokens"]),
        member=member,
        cost_by_year={int(y): Decimal(v) for y, v in pid_data["cost_by_year"].items()},
        claims=claims,
    )


def save_cohort(cohort: Cohort, path) -> None:
    """Serialize a cohort as JSON lines: a header line, then one patient per line.

    Output is byte-deterministic for identical inputs.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"base_year": cohort.base_year, "target_year": cohort.target_year, "n_documents": len(cohort)}
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for doc in cohort.documents:
            fh.write(json.dumps(_document_to_dict(doc), sort_keys=True, separators=(",", ":")) + "\n")


def load_cohort(path) -> Cohort:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise ValueError(f"{path}: empty cohort file")
        header = json.loads(header_line)
        documents = [_document_from_dict(json.loads(line)) for line in fh if line.strip()]
    if len(documents) != header.get("n_documents"):
        raise ValueError(f"{path}: expected {header.get('n_documents')} documents, found {len(documents)}")
    return Cohort(base_year=header["base_year"], target_year=header["target_year"], documents=documents)
