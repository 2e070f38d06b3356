import csv
import io

import pytest

from pthash.cli import (
    EXIT_BUILD,
    EXIT_IO,
    EXIT_OK,
    EXIT_VERIFY,
    REPORT_FIELDS,
    generate_keys,
    main,
    parse_size,
    read_key_file,
)
from pthash.hem import PartitionedMphf, load


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def keyfile(tmp_path):
    path = tmp_path / "keys.txt"
    path.write_bytes(b"\n".join(b"key-%d" % i for i in range(2000)) + b"\n")
    return path


def test_parse_size():
    assert parse_size("1500") == 1500
    assert parse_size("4K") == 4096
    assert parse_size("2m") == 2 << 20
    assert parse_size("1G") == 1 << 30


def test_read_key_file_trailing_newline(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.write_bytes(b"x\ny\n")
    b.write_bytes(b"x\ny")
    assert read_key_file(a) == read_key_file(b) == [b"x", b"y"]


def test_generated_keys_distinct():
    keys = generate_keys(5000, 3)
    assert len(set(keys)) == 5000 and all(len(k) == 8 for k in keys)
    assert keys == generate_keys(5000, 3)


def test_build_gen_reports_and_sizes(tmp_path, capsys):
    out = tmp_path / "f.bin"
    assert main(["build", "--gen", "1000", "--seed", "42", "-o", str(out)]) == EXIT_OK
    (row,) = rows(capsys.readouterr().out)
    assert list(row) == REPORT_FIELDS
    assert row["n"] == "1000" and row["mode"] == "internal-flat" and row["encoder"] == "dd"
    assert float(row["bits_per_key"]) > 0 and int(row["pilot_attempts"]) >= 703
    assert load(out).m == 703


def test_build_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    main(["build", "--gen", "3000", "-o", str(a), "--encoder", "ef"])
    main(["build", "--gen", "3000", "-o", str(b), "--encoder", "ef", "--threads", "3"])
    assert a.read_bytes() == b.read_bytes()


def test_build_empty(tmp_path, capsys):
    out = tmp_path / "f.bin"
    assert main(["build", "--gen", "0", "-o", str(out)]) == EXIT_OK
    assert load(out).n == 0
    assert main(["verify", str(out), "--gen", "0"]) == EXIT_OK
    capsys.readouterr()
    assert main(["bench", str(out), "--gen", "0"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == ",".join(REPORT_FIELDS)


def test_verify_and_query(tmp_path, keyfile, capsys):
    out = tmp_path / "f.bin"
    assert main(["build", "-i", str(keyfile), "-o", str(out), "--encoder", "pc"]) == EXIT_OK
    assert main(["verify", str(out), "-i", str(keyfile)]) == EXIT_OK
    capsys.readouterr()
    assert main(["query", str(out), "key-0", "key-1999"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    f = load(out)
    assert lines == [f"key-0\t{f(b'key-0')}", f"key-1999\t{f(b'key-1999')}"]


def test_verify_detects_foreign_keys(tmp_path, keyfile, capsys):
    out = tmp_path / "f.bin"
    main(["build", "-i", str(keyfile), "-o", str(out)])
    other = tmp_path / "other.txt"
    other.write_bytes(b"\n".join(b"other-%d" % i for i in range(2000)))
    capsys.readouterr()
    assert main(["verify", str(out), "-i", str(other)]) == EXIT_VERIFY
    assert "violation" in capsys.readouterr().out
    assert main(["verify", str(out), "--gen", "10"]) == EXIT_VERIFY
    assert "mismatch" in capsys.readouterr().out


def test_duplicate_lines(tmp_path, capsys):
    path = tmp_path / "dup.txt"
    path.write_bytes(b"a\nb\nc\nb\n")
    assert main(["build", "-i", str(path), "-o", str(tmp_path / "f.bin")]) == EXIT_BUILD
    assert "lines 2 and 4" in capsys.readouterr().err
    assert not (tmp_path / "f.bin").exists()


def test_io_errors(tmp_path, capsys):
    assert main(["build", "-i", str(tmp_path / "nope"), "-o", str(tmp_path / "f.bin")]) == EXIT_IO
    assert main(["verify", str(tmp_path / "nope.bin"), "--gen", "5"]) == EXIT_IO
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a function at all")
    assert main(["query", str(junk), "x"]) == EXIT_IO


@pytest.mark.parametrize("argv", [
    ["build", "--gen", "10", "-o", "x", "--ram-budget", "1M"],
    ["build", "--gen", "10", "-o", "x", "--threads", "0"],
    ["build", "--gen", "10", "-o", "x", "--partitions", "2", "--avg-partition-size", "5"],
    ["build", "--gen", "10", "-i", "k", "-o", "x"],
    ["build", "-o", "x"],
    ["build", "--gen", "-1", "-o", "x"],
    ["bench", "f", "--gen", "1", "--repetitions", "0"],
])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_parameters_exit_usage(tmp_path, capsys):
    assert main(["build", "--gen", "10", "-o", str(tmp_path / "f"), "-a", "1.5"]) == 2
    assert main(["build", "--gen", "10", "-o", str(tmp_path / "f"), "-c", "1.0"]) == 2


def test_external_and_env(tmp_path, monkeypatch, capsys):
    spill = tmp_path / "spill"
    spill.mkdir()
    monkeypatch.setenv("PTHASH_RAM_BUDGET", "60K")
    monkeypatch.setenv("PTHASH_TMPDIR", str(spill))
    ext, ref = tmp_path / "ext.bin", tmp_path / "ref.bin"
    assert main(["build", "--gen", "20000", "-o", str(ext), "--external"]) == EXIT_OK
    assert rows(capsys.readouterr().out)[0]["mode"] == "external-flat"
    main(["build", "--gen", "20000", "-o", str(ref)])
    assert ext.read_bytes() == ref.read_bytes()
    assert list(spill.iterdir()) == []


def test_partitioned_modes(tmp_path, capsys):
    out = tmp_path / "hem.bin"
    assert main(["build", "--gen", "5000", "-o", str(out), "--partitions", "4"]) == EXIT_OK
    assert rows(capsys.readouterr().out)[0]["mode"] == "internal-hem"
    f = load(out)
    assert isinstance(f, PartitionedMphf) and f.r == 4
    assert main(["verify", str(out), "--gen", "5000"]) == EXIT_OK
    out2 = tmp_path / "hem2.bin"
    assert main(["build", "--gen", "5000", "-o", str(out2), "--avg-partition-size", "1000"]) == EXIT_OK
    assert load(out2).r == 5
    out3 = tmp_path / "hem3.bin"
    assert main(["build", "--gen", "5000", "-o", str(out3), "--partitions", "4",
                 "--external", "--ram-budget", "40K", "--tmp-dir", str(tmp_path)]) == EXIT_OK
    assert out3.read_bytes() == out.read_bytes()


def test_bench_report_appends(tmp_path, capsys):
    out, report = tmp_path / "f.bin", tmp_path / "r.csv"
    main(["build", "--gen", "2000", "-o", str(out), "--report", str(report)])
    assert main(["bench", str(out), "--gen", "2000", "--repetitions", "2",
                 "--report", str(report)]) == EXIT_OK
    assert capsys.readouterr().out == ""
    build_row, bench_row = rows(report.read_text())
    assert build_row["mode"] == "internal-flat" and bench_row["mode"] == "query-flat"
    assert bench_row["construction_seconds"] == "" and float(bench_row["lookup_ns_per_key"]) > 0
    assert main(["bench", str(out), "--gen", "3"]) == EXIT_VERIFY


def test_external_build_respects_budget(tmp_path, monkeypatch, capsys):
    # trace map, merge and pilot search; encoding the final pilots is outside the budget
    import tracemalloc
    import pthash.extmem as extmem

    peaks, files = [], []
    real_map, real_merge, real_search = (extmem.map_external, extmem.merge_external,
                                         extmem.search_external)

    def traced_map(*args, **kwargs):
        tracemalloc.start()
        runs = real_map(*args, **kwargs)
        files.append(len(runs))
        return runs

    def traced_merge(*args, **kwargs):
        buckets = real_merge(*args, **kwargs)
        files.append(len(buckets.paths))
        return buckets

    def traced_search(*args, **kwargs):
        found = real_search(*args, **kwargs)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
        files.append(found.pilot_files)
        return found

    monkeypatch.setattr(extmem, "map_external", traced_map)
    monkeypatch.setattr(extmem, "merge_external", traced_merge)
    monkeypatch.setattr(extmem, "search_external", traced_search)
    argv = ["build", "--gen", "50000", "--external", "--ram-budget", "60000",
            "--tmp-dir", str(tmp_path), "-o", str(tmp_path / "f.bin")]
    for _ in range(3):  # the first runs compile kernels and warm numpy's caches
        files.clear()
        assert main(argv) == EXIT_OK
    assert files[0] >= 4
    assert peaks[-1] <= 60000 + extmem.MemoryBudget(60000).slack(sum(files)), (peaks, files)
