"""Dataset manifest: one CSV record per case.

Columns: ``case_id, center_id, pet, ct, gtv, x0, y0, z0, x1, y1, z1``. Paths
are relative to the manifest's directory; ``gtv`` may be empty. The six
integers are the bounding box, start inclusive and stop exclusive per axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .nifti import volume_read, volume_write
from .volume import BoundingBox, PatientCase

FIELDS = ["case_id", "center_id", "pet", "ct", "gtv", "x0", "y0", "z0", "x1", "y1", "z1"]


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    case_id: str
    center_id: str
    pet: Path
    ct: Path
    gtv: Path | None
    bbox: BoundingBox

    def load(self) -> PatientCase:
        return PatientCase(
            self.case_id,
            self.center_id,
            volume_read(self.pet, "PET"),
            volume_read(self.ct, "CT"),
            None if self.gtv is None else volume_read(self.gtv, "MASK"),
            self.bbox,
        )


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != FIELDS:
            raise ManifestError(f"{path}: expected header {','.join(FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = BoundingBox.from_ints(row[k] for k in FIELDS[5:])
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad bounding box: {exc}") from exc
            gtv = row["gtv"].strip()
            entries.append(
                ManifestEntry(
                    row["case_id"].strip(),
                    row["center_id"].strip(),
                    root / row["pet"].strip(),
                    root / row["ct"].strip(),
                    root / gtv if gtv else None,
                    box,
                )
            )
    ids = [e.case_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate case ids")
    return entries


def write_manifest(entries, path) -> None:
    path = Path(path)
    root = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        return str(Path(p).resolve().relative_to(root))

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for e in entries:
            writer.writerow([e.case_id, e.center_id, rel(e.pet), rel(e.ct), rel(e.gtv), *e.bbox.as_ints()])


def save_case(case: PatientCase, directory) -> ManifestEntry:
    """Write the case's volumes as ``<case_id>_{pet,ct,gtv}.nii.gz`` under ``directory``."""
    directory = Path(directory)
    pet = directory / f"{case.case_id}_pet.nii.gz"
    ct = directory / f"{case.case_id}_ct.nii.gz"
    volume_write(case.pet, pet)
    volume_write(case.ct, ct)
    gtv = None
    if case.gtv is not None:
        gtv = directory / f"{case.case_id}_gtv.nii.gz"
        volume_write(case.gtv, gtv)
    return ManifestEntry(case.case_id, case.center_id, pet, ct, gtv, case.bbox)


def load_cases(path) -> list[PatientCase]:
    return [e.load() for e in read_manifest(path)]
