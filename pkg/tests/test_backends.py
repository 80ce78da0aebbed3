import numpy as np
import pytest

from pseudoris.backends import (BackendRegistry, TokenSequence, Vocabulary, check_distribution,
                                check_embedding, list_backends, resolve_backend)
from pseudoris.errors import BackendLookupError, ContractError, RegistrationError, UsageError
from pseudoris.maskops import CropSpec, crop
from pseudoris.synthworld import SynthCaptioner, SynthScorer, make_scene


class TestVocabulary:
    def test_decode_drops_specials(self):
        v = Vocabulary(("a", "cow", "<eos>", "<bos>"), bos_id=3, eos_id=2)
        assert v.decode([0, 1, 2]) == "a cow"
        assert v.ids(["cow", "a"]) == [1, 0]

    def test_rejects_duplicates_and_bad_ids(self):
        with pytest.raises(UsageError):
            Vocabulary(("a", "a"), 0, 1)
        with pytest.raises(UsageError):
            Vocabulary(("a", "b"), 0, 5)
        with pytest.raises(UsageError):
            Vocabulary(("a", "b"), 1, 1)

    def test_unknown_token(self):
        v = Vocabulary(("a", "<eos>", "<bos>"), 2, 1)
        with pytest.raises(UsageError):
            v.id("cow")


class TestTokenSequence:
    vocab = Vocabulary(("a", "<eos>", "<bos>"), 2, 1)

    def test_complete_needs_eos(self):
        TokenSequence((0, 1), True).validate(self.vocab, 5)
        with pytest.raises(ContractError):
            TokenSequence((0,), True).validate(self.vocab, 5)

    def test_no_bos_and_length(self):
        with pytest.raises(ContractError):
            TokenSequence((2, 1), True).validate(self.vocab, 5)
        with pytest.raises(ContractError):
            TokenSequence((0, 0, 0), False).validate(self.vocab, 2)


class TestChecks:
    def test_distribution(self):
        np.testing.assert_array_equal(check_distribution([0.25, 0.75]), [0.25, 0.75])
        for bad in ([0.5, 0.6], [-0.1, 1.1], [[1.0]], [np.nan, 1.0]):
            with pytest.raises(ContractError):
                check_distribution(bad)
        with pytest.raises(ContractError):
            check_distribution([1.0], size=2)

    def test_embedding(self):
        check_embedding(np.array([0.6, 0.8]))
        with pytest.raises(ContractError):
            check_embedding(np.array([1.0, 1.0]))


class TestRegistry:
    def test_register_resolve(self):
        reg = BackendRegistry()
        reg.register("synth", "captioner", SynthCaptioner)
        assert isinstance(reg.resolve("captioner", "synth"), SynthCaptioner)

    def test_duplicate(self):
        reg = BackendRegistry()
        reg.register("synth", "captioner", SynthCaptioner)
        with pytest.raises(RegistrationError):
            reg.register("synth", "captioner", SynthCaptioner)

    def test_missing(self):
        with pytest.raises(BackendLookupError):
            BackendRegistry().resolve("captioner", "missing")

    def test_unknown_kind(self):
        with pytest.raises(UsageError):
            BackendRegistry().register("x", "tokenizer", object)

    def test_resolve_is_idempotent(self):
        reg = BackendRegistry()
        reg.register("synth", "scorer", SynthScorer)
        assert reg.resolve("scorer", "synth") is reg.resolve("scorer", "synth")

    def test_names_sorted(self):
        reg = BackendRegistry()
        for name in ("zeta", "alpha", "mid"):
            reg.register(name, "scorer", SynthScorer)
        assert reg.names("scorer") == ["alpha", "mid", "zeta"]

    def test_exclusive_flag_set_on_instance(self):
        reg = BackendRegistry()
        reg.register("s", "scorer", SynthScorer, exclusive=True)
        assert reg.resolve("scorer", "s").exclusive

    def test_default_registry_has_synth(self):
        assert isinstance(resolve_backend("scorer", "synth"), SynthScorer)
        assert list_backends("mask_extractor") == ["synth", "synth-fine"]


class TestSynthContracts:
    """Every built-in backend output satisfies the declared contracts."""

    @pytest.mark.parametrize("seed", range(5))
    def test_distributions_and_embeddings(self, seed):
        scene = make_scene(seed, 4, 0.5)
        image = scene.render()
        cap = SynthCaptioner()
        v = cap.vocabulary
        for o in scene.objects:
            for spec in (CropSpec(0.0), CropSpec(0.2), CropSpec(0.0, True)):
                patch = crop(image, scene.object_mask(o.id), spec)
                e = cap.embed(patch)
                assert abs(np.linalg.norm(e) - 1.0) < 1e-6
                for prefix in ([], [v.id("a")], [v.id("a"), v.id(o.attrs[0])],
                               [v.id("a"), v.id(o.category)]):
                    check_distribution(cap.next_word_dist(patch, prefix), len(v))

    def test_scores_floored(self):
        scene = make_scene(3, 2, 1.0)
        patch = crop(scene.render(), scene.object_mask(0), CropSpec(0.1))
        s = SynthScorer()
        assert s.score(patch, "purple unicorn") == pytest.approx(1e-6)
        assert s.score(patch, "a the") == pytest.approx(1e-6)
        assert s.score(patch, "") == pytest.approx(1e-6)
