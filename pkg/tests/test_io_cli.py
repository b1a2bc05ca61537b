import json

import numpy as np
import pytest

from opsys import io
from opsys import matrix_core as mc
from opsys.builder import build_gs
from opsys.certificates import certify, digest
from opsys.cli import main
from opsys.exceptions import ParseError
from opsys.systems import AmbientAlgebra, OperatorSystem, SystemMap, system_span

SZ = np.diag([1.0, -1.0]).astype(complex)


@pytest.fixture(scope="module")
def chain():
    return build_gs({"K": 2, "m_max": 1})


def test_scalar_system_document():
    C = OperatorSystem.full(AmbientAlgebra(1))
    doc = json.loads(io.serialize(C))
    assert doc["kind"] == "system"
    assert doc["payload"]["basis"] == [[[[1.0, 0.0]]]]
    assert io.parse(io.serialize(C)) == C


def test_map_round_trip_exact():
    rng = np.random.default_rng(0)
    E = system_span(AmbientAlgebra(3), [mc.random_complex((3, 3), rng)])
    f = SystemMap.from_images(E, [E.basis[0]] + [b + 0.1 * mc.random_hermitian(3, rng) for b in E.basis[1:]],
                              OperatorSystem.full(AmbientAlgebra(3)))
    g = io.parse(io.serialize(f))
    assert np.array_equal(g.coeffs, f.coeffs)
    assert all(np.array_equal(a, b) for a, b in zip(g.domain.basis, f.domain.basis))
    assert io.serialize(g) == io.serialize(f)


def test_certificate_digest_recomputable():
    f = SystemMap.identity(OperatorSystem.full(AmbientAlgebra(2)))
    cert = certify("demo", 1.0, 0.5, 0.0, inputs=(f,))
    back = io.parse(io.serialize(cert))
    assert back.passed and back.inputs_digest == digest(io.parse(io.serialize(f)))
    assert not certify("demo", 1.0, 1.5, 0.0).passed


def test_chain_round_trip_byte_identical(chain):
    text = io.serialize(chain)
    assert io.serialize(io.parse(text)) == text


def test_truncated_document(tmp_path, chain, capsys):
    text = io.serialize(chain)
    with pytest.raises(ParseError):
        io.parse(text[:len(text) // 2])
    path = tmp_path / "broken.json"
    path.write_text(text[:len(text) // 2])
    assert main(["verify", "--in", str(path)]) != 0
    for bad in ('{"schema_version": 99}', "[]", '{"schema_version": 1, "kind": "nope", "payload": {}}'):
        with pytest.raises(ParseError):
            io.parse(bad)


def test_cli_cbnorm_identity(tmp_path, capsys):
    path = tmp_path / "id2.map.json"
    io.save(SystemMap.identity(OperatorSystem.full(AmbientAlgebra(2))), path)
    out = tmp_path / "report.json"
    assert main(["cbnorm", "--in", str(path), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[0] == "1.0"
    assert main(["verify", "--in", str(out)]) == 0


def test_cli_verify_fresh_chain(tmp_path, capsys):
    path = tmp_path / "chain.json"
    assert main(["build-gs", "--max-stage", "2", "--m-max", "1", "--out", str(path)]) == 0
    assert main(["verify", "--in", str(path)]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_amalgamate_then_verify(tmp_path, capsys):
    E = system_span(AmbientAlgebra(2), [SZ])
    f = SystemMap.from_images(E, [E.basis[0], 1.01 * E.basis[1]], OperatorSystem.full(AmbientAlgebra(2)))
    io.save(E, tmp_path / "E.sys.json")
    io.save(f, tmp_path / "f.map.json")
    out = tmp_path / "amalgam.json"
    code = main(["amalgamate", "--in", str(tmp_path / "E.sys.json"), str(tmp_path / "f.map.json"),
                 "--tol", "1e-6", "--out", str(out)])
    assert code == 0
    assert capsys.readouterr().out.startswith("defect ")
    report = io.load(out)
    assert report.passed
    assert main(["verify", "--in", str(out)]) == 0


def test_cli_other_subcommands_verify(tmp_path, capsys):
    E = system_span(AmbientAlgebra(2), [SZ])
    f = SystemMap.from_images(E, [E.basis[0], 1.02 * E.basis[1]], OperatorSystem.full(AmbientAlgebra(2)))
    io.save(f, tmp_path / "f.map.json")
    assert main(["ucp-nearest", "--in", str(tmp_path / "f.map.json"), "--out", str(tmp_path / "u.json")]) == 0
    assert main(["net", "--m", "1", "--net-eps", "0.5", "--out", str(tmp_path / "net.json")]) == 0
    io.save(E, tmp_path / "a.sys.json")
    io.save(system_span(AmbientAlgebra(2), [1.001 * SZ + 0.001 * np.eye(2)]), tmp_path / "b.sys.json")
    assert main(["fraisse-dist", "--in", str(tmp_path / "a.sys.json"), str(tmp_path / "b.sys.json"),
                 "--out", str(tmp_path / "d.json")]) == 0
    for name in ("u.json", "net.json", "d.json"):
        assert main(["verify", "--in", str(tmp_path / name)]) == 0


def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["cbnorm"]) == 2
    assert main(["cbnorm", "--in", str(tmp_path / "missing.json")]) == 2
    assert main(["verify"]) == 2
