import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitolora.manifest import (
    DuplicateCropIdError,
    Manifest,
    ManifestColumnError,
    ManifestFileNotFound,
    ManifestLabelError,
    ManifestFieldError,
    class_counts,
    domain_counts,
    load_manifest,
    write_manifest,
)
from mitolora.synthetic import statistics_manifest

from conftest import make_manifest

HEADER = "crop_id,image_ref,source_image_id,label,domain_id,dataset_source\n"


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "m.csv"
    p.write_text(header + body, encoding="utf-8")
    return p


def test_three_row_file_loads_in_order(tmp_path):
    p = write(tmp_path, "a,x/a.png,i1,0,d0,AMi-Br\nb,x/b.png,i1,AMF,d0,AMi-Br\nc,x/c.png,i2,nmf,d1,MIDOG25\n")
    m = load_manifest(p)
    assert len(m) == 3
    assert [r.crop_id for r in m] == ["a", "b", "c"]
    assert m.labels == [0, 1, 0]
    assert m.resolve(m.records[0]) == tmp_path / "x/a.png"


def test_duplicate_crop_id_cites_both_rows(tmp_path):
    body = "".join(f"{cid},p.png,i,0,d,s\n" for cid in ["a", "dup", "b", "c", "dup"])
    with pytest.raises(DuplicateCropIdError) as exc:
        load_manifest(write(tmp_path, body))
    assert exc.value.rows == (2, 5)
    assert "2" in str(exc.value) and "5" in str(exc.value)


def test_missing_file():
    with pytest.raises(ManifestFileNotFound):
        load_manifest("/nonexistent/manifest.csv")


@pytest.mark.parametrize(
    "header",
    [
        "crop_id,image_ref,source_image_id,label,domain_id\n",
        "crop_id,image_ref,source_image_id,label,domain_id,dataset_source,extra\n",
    ],
)
def test_column_errors(tmp_path, header):
    with pytest.raises(ManifestColumnError):
        load_manifest(write(tmp_path, "", header=header))


def test_bad_label_reports_row(tmp_path):
    with pytest.raises(ManifestLabelError) as exc:
        load_manifest(write(tmp_path, "a,p,i,0,d,s\nb,p,i,2,d,s\n"))
    assert exc.value.row == 2


def test_empty_domain_rejected(tmp_path):
    with pytest.raises(ManifestFieldError) as exc:
        load_manifest(write(tmp_path, "a,p,i,0,,s\n"))
    assert exc.value.column == "domain_id"


def test_full_size_statistics_manifest_round_trip(tmp_path):
    m = statistics_manifest()
    assert class_counts(m) == {"NMF": 10191, "AMF": 1748}
    assert len(m.image_ids()) == 454
    assert len(domain_counts(m)) == 9
    loaded = load_manifest(write_manifest(m, tmp_path / "stats.csv"))
    assert class_counts(loaded) == {"NMF": 10191, "AMF": 1748}
    assert loaded.records == m.records


def test_class_counts_small_cases():
    assert class_counts(Manifest()) == {"NMF": 0, "AMF": 0}
    m = make_manifest([("a", "i", 1, "d"), ("b", "i", 1, "d"), ("c", "j", 0, "d"), ("d", "j", 0, "d")])
    assert class_counts(m) == {"NMF": 2, "AMF": 2}
    assert domain_counts(m) == {"d": 4}


rows = st.lists(
    st.tuples(st.integers(0, 20), st.sampled_from([0, 1]), st.sampled_from(["d0", "d1", "d2", "d3"])),
    max_size=40,
)


@given(rows)
@settings(max_examples=100, deadline=None)
def test_counts_sum_to_records_and_match_tally(rs):
    m = make_manifest([(f"c{i}", f"img{img}", lab, dom) for i, (img, lab, dom) in enumerate(rs)])
    cc, dc = class_counts(m), domain_counts(m)
    assert sum(cc.values()) == len(m) == sum(dc.values())
    # direct tally
    for dom in {"d0", "d1", "d2", "d3"}:
        assert dc.get(dom, 0) == sum(1 for r in rs if r[2] == dom)
    assert cc["AMF"] == sum(1 for r in rs if r[1] == 1)


@given(rows)
@settings(max_examples=50, deadline=None)
def test_write_then_load_is_identity(tmp_path_factory, rs):
    m = make_manifest([(f"c{i}", f"img{img}", lab, dom) for i, (img, lab, dom) in enumerate(rs)])
    p = tmp_path_factory.mktemp("rt") / "m.csv"
    assert load_manifest(write_manifest(m, p)).records == m.records


def test_subset_keeps_order():
    m = make_manifest([("a", "i1", 0, "d"), ("b", "i2", 1, "d"), ("c", "i1", 1, "d")])
    assert [r.crop_id for r in m.subset({"i1"})] == ["a", "c"]


def test_require_both_labels():
    from mitolora.manifest import ManifestError

    with pytest.raises(ManifestError):
        make_manifest([("a", "i", 0, "d")]).require_both_labels()
