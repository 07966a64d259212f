import pytest
from hypothesis import given, settings, strategies as st

from inferd.errors import (
    DoubleFree,
    ImmutableTarget,
    InvalidHandle,
    NameNotFound,
    NameTaken,
    PoolExhausted,
    RangeMismatch,
)
from inferd.resources import EMB, PAGE, ResourceManager


def mk(pages=8, embs=8, cap=4):
    rm = ResourceManager(pages, embs, cap)
    rm.create_space(1)
    return rm


def test_alloc_until_exhausted():
    rm = mk(pages=3)
    hs = rm.alloc_pages(1, 3)
    assert len(hs) == 3
    assert rm.free_page_count() == 0
    with pytest.raises(PoolExhausted):
        rm.alloc_pages(1, 1)


def test_handles_are_per_owner_virtual():
    rm = mk()
    rm.create_space(2)
    h1 = rm.alloc_pages(1, 1)[0]
    h2 = rm.alloc_pages(2, 1)[0]
    # both spaces can use their own handle; neither can use the other's
    rm.resolve_page(1, h1, writable=False)
    rm.resolve_page(2, h2, writable=False)
    with pytest.raises(InvalidHandle):
        rm.resolve_page(2, h1, writable=False)


def test_two_phase_dealloc():
    rm = mk()
    h = rm.alloc_pages(1, 1)[0]
    phys = rm.schedule_dealloc(1, [h], PAGE)
    # unbound immediately: the handle is dead even before commit
    with pytest.raises(InvalidHandle):
        rm.resolve_page(1, h, writable=False)
    # but the physical unit is not yet reusable
    assert rm.free_page_count() == 7
    rm.commit_release(1, PAGE, phys)
    assert rm.free_page_count() == 8


def test_double_free_detected():
    rm = mk()
    h = rm.alloc_pages(1, 1)[0]
    rm.schedule_dealloc(1, [h], PAGE)
    with pytest.raises(DoubleFree):
        rm.schedule_dealloc(1, [h], PAGE)


def test_release_instance_settles_pending():
    rm = mk()
    h = rm.alloc_pages(1, 2)
    phys = rm.schedule_dealloc(1, [h[0]], PAGE)
    rm.release_instance(1)
    assert rm.free_page_count() == 8
    # the late commit must not double-release
    rm.commit_release(1, PAGE, phys)
    assert rm.free_page_count() == 8
    assert rm.audit() is None


def test_export_makes_pages_immutable():
    rm = mk()
    hs = rm.alloc_pages(1, 2)
    for h in hs:
        phys, meta = rm.resolve_page(1, h, writable=True)
        rm.project_append(phys, [0])
    rm.export_pages(1, hs, "prefix")
    with pytest.raises(ImmutableTarget):
        rm.resolve_page(1, hs[0], writable=True)
    rm.resolve_page(1, hs[0], writable=False)  # reads still fine


def test_export_name_collision():
    rm = mk()
    hs = rm.alloc_pages(1, 1)
    rm.export_pages(1, hs, "n")
    with pytest.raises(NameTaken):
        rm.export_pages(1, hs, "n")


def test_import_gives_reader_handles():
    rm = mk()
    rm.create_space(2)
    hs = rm.alloc_pages(1, 1)
    phys, _ = rm.resolve_page(1, hs[0], writable=True)
    rm.project_append(phys, [0, 1])
    rm.export_pages(1, hs, "p")
    got = rm.import_pages(2, "p")
    assert len(got) == 1
    phys2, meta2 = rm.resolve_page(2, got[0], writable=False)
    assert phys2 == phys
    with pytest.raises(ImmutableTarget):
        rm.resolve_page(2, got[0], writable=True)


def test_import_unknown_name():
    rm = mk()
    with pytest.raises(NameNotFound):
        rm.import_pages(1, "ghost")


def test_export_survives_exporter_release():
    rm = mk()
    rm.create_space(2)
    hs = rm.alloc_pages(1, 1)
    rm.export_pages(1, hs, "keep")
    rm.release_instance(1)
    got = rm.import_pages(2, "keep")
    assert len(got) == 1
    assert rm.audit() is None


def test_unexport_is_exporter_only():
    rm = mk()
    rm.create_space(2)
    hs = rm.alloc_pages(1, 1)
    rm.export_pages(1, hs, "e")
    with pytest.raises(InvalidHandle):
        rm.unexport_pages(2, "e")
    rm.unexport_pages(1, "e")
    with pytest.raises(NameNotFound):
        rm.import_pages(2, "e")


def test_import_refcount_keeps_pages_alive():
    rm = mk()
    rm.create_space(2)
    hs = rm.alloc_pages(1, 1)
    rm.export_pages(1, hs, "x")
    rm.import_pages(2, "x")
    rm.release_instance(1)
    # exporter gone, importer still holds the page; pool must not reuse it
    assert rm.free_page_count() == 7
    rm.release_instance(2)
    # registry still pins it
    assert rm.free_page_count() == 7
    rm.clear_registry()
    assert rm.free_page_count() == 8
    assert rm.audit() is None


def test_project_append_dense_only():
    rm = mk(cap=2)
    h = rm.alloc_pages(1, 1)[0]
    phys, _ = rm.resolve_page(1, h, writable=True)
    assert rm.project_append(phys, [5]) == [0]
    assert rm.project_append(phys, [6]) == [1]
    with pytest.raises(RangeMismatch):
        rm.project_append(phys, [7])


def test_emb_pool_and_kinds():
    rm = mk(embs=2)
    es = rm.alloc_embs(1, 2)
    with pytest.raises(PoolExhausted):
        rm.alloc_embs(1, 1)
    phys, meta = rm.resolve_emb(1, es[0])
    assert meta.kind == "unfilled"
    rm.project_embed(phys, 72, 0)
    _, meta = rm.resolve_emb(1, es[0])
    assert meta.kind == "input" and meta.position == 0 and meta.token == 72


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["alloc", "free", "export", "release"]),
                min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_audit_stays_clean_under_churn(script, rng):
    rm = ResourceManager(16, 16, 4)
    rm.create_space(1)
    rm.create_space(2)
    held = {1: [], 2: []}
    exports = 0
    for step in script:
        owner = rng.choice([1, 2])
        if step == "alloc":
            n = rng.randint(1, 3)
            if rm.free_page_count() >= n:
                held[owner].extend(rm.alloc_pages(owner, n))
        elif step == "free" and held[owner]:
            h = held[owner].pop()
            try:
                phys = rm.schedule_dealloc(owner, [h], PAGE)
            except ImmutableTarget:
                continue
            rm.commit_release(owner, PAGE, phys)
        elif step == "export" and held[owner]:
            try:
                rm.export_pages(owner, [held[owner][-1]], f"n{exports}")
                exports += 1
            except (NameTaken, ImmutableTarget):
                pass
        elif step == "release":
            rm.release_instance(owner)
            held[owner] = []
            rm.create_space(owner)
        assert rm.audit() is None
    rm.release_instance(1)
    rm.release_instance(2)
    rm.clear_registry()
    assert rm.audit() is None
    assert rm.free_page_count() == 16
