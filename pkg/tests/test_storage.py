import pytest

from avh_forge.storage import FSSpecTarget, UninitializedTargetError


def test_target(tmp_target):
    mapper = tmp_target.get_mapper()
    mapper["foo"] = b"bar"
    with open(tmp_target.root_path + "/foo") as f:
        res = f.read()
    assert res == "bar"
    with pytest.raises(FileNotFoundError):
        tmp_target.rm("baz")
    with pytest.raises(FileNotFoundError):
        with tmp_target.open("baz"):
            pass


def test_nested_writes(tmp_target):
    assert not tmp_target.exists("frames/a/bundle.json")
    with tmp_target.open("frames/a/bundle.json", mode="w") as f:
        f.write("{}")
    with tmp_target.open("frames/b/texture.png", mode="wb") as f:
        f.write(b"\x89PNG")
    assert tmp_target.exists("frames/a/bundle.json")
    assert tmp_target.ls("frames") == ["a", "b"]
    assert tmp_target.ls("nowhere") == []
    assert tmp_target.url("frames/a") == tmp_target.root_path + "/frames/a"
    tmp_target.rm("frames/b", recursive=True)
    assert tmp_target.ls("frames") == ["a"]


def test_target_from_url(tmp_path):
    target = FSSpecTarget.from_url(str(tmp_path / "output"))
    assert (tmp_path / "output").is_dir()
    target.get_mapper("store.zarr")["x"] = b"1"
    assert (tmp_path / "output" / "store.zarr" / "x").read_bytes() == b"1"


def test_uninitialized_target(uninitialized_target):
    target = uninitialized_target
    with pytest.raises(UninitializedTargetError):
        target.get_mapper()
    with pytest.raises(UninitializedTargetError):
        target.exists("foo")
    with pytest.raises(UninitializedTargetError):
        target.rm("foo")
    with pytest.raises(UninitializedTargetError):
        target.ls()
    with pytest.raises(UninitializedTargetError):
        with target.open("foo"):
            pass
