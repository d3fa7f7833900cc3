import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itigen.core import AttributeSet, AttributeSpec, FairTokenTable, enumerate_combinations
from itigen.encoders import ToyEncoder
from itigen.errors import BackendUnavailable, SchemaError, ValidationError
from itigen.generation import (GenerationJob, StubBackend, assemble_prompt, build_hard_prompt,
                               generate, guided_step, hybrid_conditioning, load_job,
                               make_backend, read_manifest)

T = "a headshot of a person"


@pytest.fixture
def enc():
    return ToyEncoder(seed=0, d_tok=16, d_emb=8)


@pytest.fixture
def backend(enc):
    return StubBackend(enc, steps=4)


def cond(enc, text):
    return enc.tokenize(text)


def test_guided_step_matches_formula_exactly(enc, backend):
    x = backend.initial_latent(3)
    pos, neg = cond(enc, "a photo of a cat"), cond(enc, "blurry")
    a = backend.denoise(x, 2, pos)
    b = backend.denoise(x, 2, neg)
    out = guided_step(backend, x, 2, pos, neg, 7.5)
    assert np.array_equal(out, 7.5 * (a - b) + b)


def test_guidance_collapses(enc, backend):
    x = backend.initial_latent(0)
    pos, neg = cond(enc, "a person"), cond(enc, "eyeglasses")
    f_pos = backend.denoise(x, 1, pos)
    for scale in (0.5, 1.0, 7.5, 13.0):
        assert np.array_equal(guided_step(backend, x, 1, pos, pos, scale), f_pos)
    assert np.array_equal(guided_step(backend, x, 1, pos, neg, 1.0), f_pos)
    assert np.array_equal(guided_step(backend, x, 1, pos, None, 1.0), f_pos)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 3),
       st.sampled_from([0.5, 1.5, 2.25, 7.5, 8.0, 3.0]), st.sampled_from([0.25, 1.0, 4.5, 7.5]))
def test_guidance_is_affine_in_scale(seed, t, s1, s2):
    enc = ToyEncoder(seed=0, d_tok=16, d_emb=8)
    backend = StubBackend(enc, steps=4)
    x = backend.initial_latent(seed)
    pos, neg = enc.tokenize("a person smiling"), enc.tokenize("eyeglasses")
    diff = backend.denoise(x, t, pos) - backend.denoise(x, t, neg)
    lhs = guided_step(backend, x, t, pos, neg, s2) - guided_step(backend, x, t, pos, neg, s1)
    assert np.array_equal(lhs, (s2 - s1) * diff)


def test_guidance_rejects_bad_scale(enc, backend):
    with pytest.raises(ValidationError):
        guided_step(backend, backend.initial_latent(0), 0, None, None, 0.0)


def test_hard_prompts(faces_schema):
    gender = faces_schema.subset(["gender"])
    glasses = faces_schema.subset(["eyeglasses"])
    assert build_hard_prompt(T, gender, (0,)) == ("a headshot of a woman", "")
    assert build_hard_prompt(T, glasses, (0,)) == (T, "eyeglasses")
    assert build_hard_prompt(T, glasses, (0,), negative_prompting=False) == (
        "a headshot of a person without eyeglasses", "")
    assert build_hard_prompt(T, glasses, (1,)) == ("a headshot of a person eyeglasses", "")
    assert build_hard_prompt(T, AttributeSet(), ()) == (T, "")
    assert build_hard_prompt(T, faces_schema, (1, 0)) == ("a headshot of a man", "eyeglasses")


def test_hard_prompt_missing_phrase():
    attrs = AttributeSet([AttributeSpec("bald", ("no", "yes"))])
    with pytest.raises(SchemaError, match="bald=yes"):
        build_hard_prompt(T, attrs, (1,))


def _table(rng, sizes=(2,), q=3, d_tok=16, names=None):
    names = names or [f"a{m}" for m in range(len(sizes))]
    attrs = AttributeSet(AttributeSpec(n, tuple(f"c{i}" for i in range(k)), q)
                         for n, k in zip(names, sizes))
    return FairTokenTable(attrs, [rng.standard_normal((k, q, d_tok)) for k in sizes])


def test_assemble_prompt_lengths_and_plug_and_play(enc, rng):
    table = _table(rng)
    p = assemble_prompt(T, table, (1,), enc)
    assert len(p) == 5 + 3
    assert np.array_equal(assemble_prompt(T, None, (), enc).assembled_tokens, enc.tokenize(T))
    doctor = assemble_prompt("a headshot of a doctor", table, (1,), enc)
    assert np.array_equal(doctor.assembled_tokens[5:], p.assembled_tokens[5:])
    assert np.array_equal(doctor.base_tokens, enc.tokenize("a headshot of a doctor"))


def test_hybrid_degenerate_cases(enc, rng, faces_schema):
    table = _table(rng, names=["age"])
    tokens, neg = hybrid_conditioning(T, table, (1,), AttributeSet(), (), enc)
    assert neg == ""
    assert np.array_equal(tokens, assemble_prompt(T, table, (1,), enc).assembled_tokens)
    glasses = faces_schema.subset(["eyeglasses"])
    tokens, neg = hybrid_conditioning(T, None, (), glasses, (0,), enc)
    pos, expected_neg = build_hard_prompt(T, glasses, (0,))
    assert neg == expected_neg == "eyeglasses"
    assert np.array_equal(tokens, enc.tokenize(pos))
    tokens, neg = hybrid_conditioning(T, table, (0,), glasses, (0,), enc)
    assert neg == "eyeglasses" and len(tokens) == 5 + 3


def test_hybrid_rejects_overlap(enc, rng, faces_schema):
    table = _table(rng, names=["eyeglasses"])
    with pytest.raises(ValidationError):
        hybrid_conditioning(T, table, (0,), faces_schema.subset(["eyeglasses"]), (0,), enc)


def test_record_counts_binary(enc, rng):
    table = _table(rng, q=1)
    job = GenerationJob("ITI-GEN", T, count=104, token_table=table, backend="stub:steps=1")
    records = generate(job, enc)
    assert len(records) == 208
    per_combo = np.bincount([r.combination_index for r in records])
    assert per_combo.max() == per_combo.min() == 104


def test_record_counts_forty_single_attributes(enc):
    rng = np.random.default_rng(0)
    total = 0
    backend = StubBackend(enc, steps=1)
    for m in range(40):
        table = _table(rng, q=1, names=[f"attr{m}"])
        job = GenerationJob("ITI-GEN", T, count=104, token_table=table, batch_size=104)
        total += len(generate(job, enc, backend))
    assert total == 8320


def test_generation_is_deterministic_and_separable(enc, rng):
    table = _table(rng, sizes=(2, 2), q=2)
    job = GenerationJob("ITI-GEN", T, count=3, token_table=table, seed=5, backend="stub:steps=3")
    a = [r.digest() for r in generate(job, enc)]
    b = [r.digest() for r in generate(job, enc)]
    assert a == b
    job1 = GenerationJob("ITI-GEN", T, count=1, token_table=table, seed=5, backend="stub:steps=3")
    latents = [r.latent for r in generate(job1, enc)]
    assert len({lat.tobytes() for lat in latents}) == 4


def test_seed_offsets(enc, rng):
    table = _table(rng, q=1)
    records = generate(GenerationJob("ITI-GEN", T, count=4, token_table=table, seed=100,
                                     backend="stub:steps=1"), enc)
    assert [r.seed_offset for r in records] == list(range(8))
    assert [r.seed for r in records] == [100 + k for k in range(8)]


def test_layout_manifest_and_resume(tmp_path, enc, rng):
    table = _table(rng, q=1)
    job = GenerationJob("ITI-GEN", T, count=4, token_table=table, batch_size=2,
                        backend="stub:steps=2")
    generate(job, enc, out_dir=tmp_path)
    rows = read_manifest(tmp_path / "manifest.tsv")
    assert len(rows) == 8
    assert {r["path"] for r in rows} == {f"ITI-GEN/{k}/{o}.png" for k in range(2)
                                         for o in range(4 * k, 4 * k + 4)}
    hashes = {r["path"]: (tmp_path / r["path"]).read_bytes() for r in rows}
    (tmp_path / "ITI-GEN/1/5.png").unlink()
    backend = StubBackend(enc, steps=2)
    again = generate(job, enc, backend, out_dir=tmp_path)
    assert len(again) == 8
    assert backend.calls == 2 * 2
    assert (tmp_path / "ITI-GEN/1/5.png").read_bytes() == hashes["ITI-GEN/1/5.png"]


def test_sd_hps_hpsn_share_one_path(enc, faces_schema):
    backend = StubBackend(enc, steps=2)
    for method in ("SD", "HPS", "HPSn"):
        records = generate(GenerationJob(method, T, count=2, schema=faces_schema), enc, backend)
        assert len(records) == 2 * 4
    hps = generate(GenerationJob("HPS", T, count=1, schema=faces_schema), enc, backend)
    hpsn = generate(GenerationJob("HPSn", T, count=1, schema=faces_schema), enc, backend)
    # negated categories differ between HPS and HPSn, affirmative ones do not
    assert np.array_equal(hps[1].latent, hpsn[1].latent)
    assert not np.array_equal(hps[0].latent, hpsn[0].latent)


def test_job_validation():
    with pytest.raises(ValidationError):
        GenerationJob("DALL-E", T)
    with pytest.raises(ValidationError):
        GenerationJob("SD", T, guidance_scale=0)
    with pytest.raises(ValidationError):
        GenerationJob("ITI-GEN", T)


def test_unavailable_backend(enc):
    with pytest.raises(BackendUnavailable):
        make_backend("stable-diffusion-v1-4", enc)


def test_load_job_resolves_relative_paths(tmp_path, rng, faces_schema):
    from itigen.core import save_schema

    save_schema(faces_schema, tmp_path / "schema.yaml")
    (tmp_path / "job.yaml").write_text(
        "method: HPSn\nprompt: a headshot of a person\nschema: schema.yaml\ncount: 3\nsteps: 5\n")
    job = load_job(tmp_path / "job.yaml", {"count": 2})
    assert job.count == 2 and job.backend == "stub:steps=5"
    assert job.schema == faces_schema
    assert len(enumerate_combinations(job.joint_attributes)) == 4
