import random
import shutil

import pytest
from hypothesis import given, settings, strategies as st

from helpers import oracle_scan, random_lean_file
from proofloop.leanenv import (
    DEFAULT_PERMITTED_AXIOMS,
    DeclNotFound,
    ParseAmbiguity,
    RealVerifier,
    SimRule,
    SimRuleError,
    SimVerifier,
    Workspace,
    audit_verdict,
    extract_signature_text,
    mask_lean_source,
    normalize_signature,
    parse_axioms_output,
    parse_build_output,
    parse_sim_rules,
    scan_forbidden_text,
    signature_match,
)

CLEAN_LISTING = """/-
Copyright notice. /- nested block -/ still one comment.
-/
import Mathlib.GroupTheory.Perm.Basic

/-- A docstring mentioning that nothing here is admitted. -/
theorem cyclic_normal (h : True) : True := by
  -- the word sorry in a comment is fine
  have s : String := "sorry admit axiom"
  exact h

theorem sorryFree : True := trivial
"""


class TestScanner:
    def test_comment_only_occurrence_is_masked(self):
        assert scan_forbidden_text("-- sorry\n") == []

    def test_clean_listing_has_no_occurrences(self):
        assert scan_forbidden_text(CLEAN_LISTING) == []

    def test_axiom_declaration_is_flagged(self):
        hits = scan_forbidden_text("axiom bad : False\n", "f.lean")
        assert hits == [("axiom", "f.lean", 1)]

    def test_line_numbers_are_reported(self):
        text = "theorem a : True := trivial\n\ntheorem b : True := by\n  sorry\n"
        assert scan_forbidden_text(text) == [("sorry", "<memory>", 4)]

    def test_identifiers_containing_tokens_not_flagged(self):
        text = "def sorryFree := unsorry admitted axiom_of_choice sorry' x\n"
        assert scan_forbidden_text(text) == []

    def test_nested_block_comments(self):
        text = "/- a /- sorry -/ admit -/ sorry\n"
        assert scan_forbidden_text(text) == [("sorry", "<memory>", 1)]

    def test_string_literals_with_escapes(self):
        text = 'def x := "a\\" sorry" \ndef y := admit\n'
        assert scan_forbidden_text(text) == [("admit", "<memory>", 2)]

    def test_unterminated_comment_masks_to_eof(self):
        assert scan_forbidden_text("/- sorry admit") == []

    def test_all_three_tokens(self):
        text = "sorry admit axiom\n"
        assert [t for t, _, _ in scan_forbidden_text(text)] == ["sorry", "admit", "axiom"]

    def test_agrees_with_character_oracle_on_generated_files(self):
        rng = random.Random(987654)
        for _ in range(250):
            text = random_lean_file(rng)
            assert scan_forbidden_text(text) == oracle_scan(text), text


class TestNormalization:
    def test_collapses_whitespace(self):
        assert normalize_signature("theorem  t :\n  True") == "theorem t : True"

    @given(st.text(alphabet=" \n\tabα:(){}", max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, text):
        once = normalize_signature(text)
        assert normalize_signature(once) == once


MAIN_THEOREM = """import Mathlib.GroupTheory.GroupAction.MultipleTransitivity

namespace BurnsidePrimeDegreeTheorem
open MulAction

theorem MainTheorem
    {α : Type*} [Fintype α]
    {G : Subgroup (Equiv.Perm α)}
    (htrans : IsPretransitive G α)
    (hp : (Fintype.card α).Prime) :
    IsMultiplyPretransitive G α 2 ∨
      ∃ N : Subgroup G, N.Normal ∧ IsPretransitive N α ∧
        ∀ a : α, MulAction.stabilizer N a = ⊥ := by
  sorry

end BurnsidePrimeDegreeTheorem
"""


class TestExtractSignature:
    def test_one_liner(self):
        sig = extract_signature_text("theorem t : True := trivial\n", "t")
        assert sig.keyword == "theorem"
        assert sig.name == "t"
        assert sig.binders_and_hypotheses == ""
        assert sig.conclusion == "True"
        assert sig.normalized == "theorem t : True"

    def test_multiline_theorem_with_binders(self):
        sig = extract_signature_text(MAIN_THEOREM, "MainTheorem")
        assert sig.name == "MainTheorem"
        assert "IsMultiplyPretransitive G α 2 ∨" in sig.conclusion
        assert sig.binders_and_hypotheses.startswith("{α : Type*}")
        assert "(hp : (Fintype.card α).Prime)" in sig.binders_and_hypotheses

    def test_binder_colons_do_not_split_the_header(self):
        text = "theorem t (x : Nat) [inst : Inhabited Nat] {y : Nat} : x = x := rfl\n"
        sig = extract_signature_text(text, "t")
        assert sig.conclusion == "x = x"

    def test_missing_declaration(self):
        with pytest.raises(DeclNotFound):
            extract_signature_text("theorem other : True := trivial\n", "t")

    def test_ambiguous_declaration(self):
        text = "theorem t : True := trivial\ntheorem t : True := trivial\n"
        with pytest.raises(ParseAmbiguity):
            extract_signature_text(text, "t")

    def test_commented_out_declaration_not_matched(self):
        text = "-- theorem t : False := trivial\ntheorem t : True := trivial\n"
        sig = extract_signature_text(text, "t")
        assert sig.conclusion == "True"

    def test_name_prefix_is_not_a_match(self):
        text = "theorem t2 : False := trivial\ntheorem t : True := trivial\n"
        assert extract_signature_text(text, "t").conclusion == "True"

    def test_shipped_replay_input_extracts(self):
        from helpers import BURNSIDE_DIR

        text = (BURNSIDE_DIR / "input.lean").read_text(encoding="utf-8")
        sig = extract_signature_text(text, "MainTheorem")
        assert sig.name == "MainTheorem"
        assert "IsMultiplyPretransitive G α 2 ∨" in sig.conclusion


def _ws_with(tmp_path, sources: dict[str, str], target: str | None = None) -> Workspace:
    ws = Workspace(root_dir=tmp_path)
    for node_id, text in sources.items():
        ws.write_node_source(node_id, text, is_target=node_id == target)
    return ws


class TestSignatureMatch:
    ANCHOR = "theorem t (x : Nat) : x = x"

    def test_reformatted_whitespace_matches(self, tmp_path):
        ws = _ws_with(tmp_path, {"t": "theorem t   (x : Nat) :\n    x = x := rfl\n"}, "t")
        assert signature_match("theorem t (x : Nat)\n  : x = x", "t", ws)

    def test_weakened_conclusion_rejected(self, tmp_path):
        ws = _ws_with(tmp_path, {"t": "theorem t (x : Nat) : x = x := rfl\n"}, "t")
        assert not signature_match("theorem t (x : Nat) : x = x ∧ 0 ≤ x", "t", ws)

    def test_renamed_declaration_rejected(self, tmp_path):
        ws = _ws_with(tmp_path, {"t": "theorem renamed (x : Nat) : x = x := rfl\n"}, "t")
        assert not signature_match(self.ANCHOR, "t", ws)

    def test_missing_target_file_rejected(self, tmp_path):
        ws = Workspace(root_dir=tmp_path)
        assert not signature_match(self.ANCHOR, "t", ws)


RULES_TEXT = """simrules v1
# demo table
rule clean-v3
clean true
end
rule classical
clean true
axioms propext Quot.sound Classical.choice
end
rule has-sorry
clean false
sorries 3 9
axioms sorryAx
end
rule broken
clean false
diagnostics error: kernel rejected the proof
end
"""


class TestSimVerifier:
    def test_rule_table_parses(self):
        rules = parse_sim_rules(RULES_TEXT)
        assert rules["clean-v3"] == SimRule(True, (), "", frozenset())
        assert rules["classical"].axioms == DEFAULT_PERMITTED_AXIOMS
        assert rules["has-sorry"].sorry_lines == (3, 9)

    def test_bad_rule_table_rejected(self):
        with pytest.raises(SimRuleError):
            parse_sim_rules("nope\n")
        with pytest.raises(SimRuleError):
            parse_sim_rules("simrules v1\nrule x\nwhatever y\nend\n")

    def test_keyed_source_builds_clean(self, tmp_path):
        verifier = SimVerifier(parse_sim_rules(RULES_TEXT))
        ws = _ws_with(tmp_path, {"a": "-- sim: key clean-v3\ntheorem a : True := trivial\n"})
        report = verifier.build(ws)
        assert report.clean and report.compiled
        assert report.sorry_sites == ()

    def test_bare_sorry_reports_one_site(self, tmp_path):
        verifier = SimVerifier()
        ws = _ws_with(tmp_path, {"a": "theorem a : True := by\n  sorry\n"})
        report = verifier.build(ws)
        assert not report.clean and report.compiled
        assert len(report.sorry_sites) == 1
        assert report.sorry_sites[0][1] == 2

    def test_error_directive_fails_the_build(self, tmp_path):
        verifier = SimVerifier()
        ws = _ws_with(tmp_path, {"a": "-- sim: error type mismatch\ntheorem a : True := trivial\n"})
        report = verifier.build(ws)
        assert not report.compiled and not report.clean
        assert "type mismatch" in report.diagnostics

    def test_unknown_key_fails_the_build(self, tmp_path):
        verifier = SimVerifier()
        ws = _ws_with(tmp_path, {"a": "-- sim: key ghost\n"})
        report = verifier.build(ws)
        assert not report.compiled
        assert "unknown sim rule key" in report.diagnostics

    def test_reports_aggregate_across_files(self, tmp_path):
        verifier = SimVerifier(parse_sim_rules(RULES_TEXT))
        ws = _ws_with(tmp_path, {
            "a": "-- sim: key clean-v3\n",
            "b": "theorem b : True := by\n  sorry\n",
        })
        report = verifier.build(ws)
        assert not report.clean and report.compiled
        assert len(report.sorry_sites) == 1

    def test_audit_axioms_from_key_and_directive(self, tmp_path):
        verifier = SimVerifier(parse_sim_rules(RULES_TEXT))
        ws = _ws_with(tmp_path, {
            "a": "-- sim: key classical\ntheorem a : True := trivial\n",
            "b": "-- sim: axioms myAx\ntheorem b : True := trivial\n",
        })
        assert verifier.audit_axioms(ws, "a") == DEFAULT_PERMITTED_AXIOMS | {"myAx"}

    def test_audit_marks_surviving_sorries(self, tmp_path):
        verifier = SimVerifier()
        ws = _ws_with(tmp_path, {"a": "theorem a : True := by\n  sorry\n"})
        assert verifier.audit_axioms(ws, "a") == {"sorryAx"}

    def test_same_workspace_same_report(self, tmp_path):
        verifier = SimVerifier(parse_sim_rules(RULES_TEXT))
        ws = _ws_with(tmp_path, {"a": "-- sim: key has-sorry\n"})
        assert verifier.build(ws) == verifier.build(ws)


GOOD_TARGET = "-- sim: key classical\ntheorem t (x : Nat) : x = x := rfl\n"
ANCHOR_SIG = "theorem t (x : Nat) : x = x"


def _audit(tmp_path, sources, permitted=DEFAULT_PERMITTED_AXIOMS, sig=ANCHOR_SIG):
    verifier = SimVerifier(parse_sim_rules(RULES_TEXT))
    ws = _ws_with(tmp_path, sources, target="t")
    return audit_verdict(ws, sig, "t", verifier, permitted)


class TestAuditVerdict:
    def test_clean_matching_classical_workspace_passes(self, tmp_path):
        report = _audit(tmp_path, {"t": GOOD_TARGET})
        assert report.passed and report.signature_match
        assert report.axioms_used == DEFAULT_PERMITTED_AXIOMS

    def test_sorry_axiom_fails(self, tmp_path):
        report = _audit(tmp_path, {"t": GOOD_TARGET,
                                   "h": "-- sim: axioms sorryAx\ntheorem h : True := trivial\n"})
        assert not report.passed
        assert "sorryAx" in report.detail

    def test_extra_axiom_fails(self, tmp_path):
        report = _audit(tmp_path, {"t": GOOD_TARGET,
                                   "h": "-- sim: axioms myAx\ntheorem h : True := trivial\n"})
        assert not report.passed

    def test_forbidden_token_fails(self, tmp_path):
        report = _audit(tmp_path, {"t": GOOD_TARGET,
                                   "h": "axiom bad : False\n"})
        assert not report.passed
        assert report.forbidden_occurrences[0][0] == "axiom"

    def test_signature_mismatch_fails(self, tmp_path):
        report = _audit(tmp_path, {"t": "-- sim: key classical\ntheorem t (x : Nat) : True := trivial\n"})
        assert not report.passed and not report.signature_match

    def test_tightened_permitted_set_fails_classical_proof(self, tmp_path):
        report = _audit(tmp_path, {"t": GOOD_TARGET}, permitted=frozenset({"propext"}))
        assert not report.passed


LAKE_OUTPUT = """info: building Proofws
warning: ././Proofws/Lem_A.lean:3:0: declaration uses 'sorry'
⚠ [2/4] Built Proofws.Lem_A
error: Proofws/Lem_B.lean:5:10: unknown identifier 'frobnicate'
error: Lean exited with code 1
"""

AXIOM_OUTPUT_SOME = "'BurnsidePrimeDegreeTheorem.MainTheorem' depends on axioms: [propext, Classical.choice, Quot.sound]\n"
AXIOM_OUTPUT_NONE = "'tiny' does not depend on any axioms\n"


class TestRealModeParsers:
    def test_build_output_splits_errors_and_sorries(self):
        errors, sites = parse_build_output(LAKE_OUTPUT)
        assert sites == [("././Proofws/Lem_A.lean", 3)]
        assert len(errors) == 2
        assert "unknown identifier" in errors[0]

    def test_axiom_listing(self):
        axioms = parse_axioms_output(AXIOM_OUTPUT_SOME, "MainTheorem")
        assert axioms == {"propext", "Classical.choice", "Quot.sound"}

    def test_axiom_listing_empty(self):
        assert parse_axioms_output(AXIOM_OUTPUT_NONE, "tiny") == set()

    def test_axiom_listing_missing_decl(self):
        from proofloop.leanenv import DriverFail

        with pytest.raises(DriverFail):
            parse_axioms_output("nothing useful\n", "t")


@pytest.mark.skipif(shutil.which("lake") is None, reason="Lean toolchain not on PATH")
class TestRealToolchainSmoke:
    def test_one_line_theorem_builds_clean_with_no_axioms(self, tmp_path):
        verifier = RealVerifier(build_timeout=600)
        ws = Workspace(root_dir=tmp_path / "ws")
        verifier.init_workspace(ws)
        ws.write_node_source("tiny", "theorem tiny : 1 = 1 := rfl\n", is_target=True)
        report = verifier.build(ws)
        assert report.clean, report.diagnostics
        assert verifier.audit_axioms(ws, "tiny") == set()


class TestMasking:
    def test_mask_preserves_length_and_newlines(self):
        text = "a -- c\nb /- x\ny -/ z \"s\" w\n"
        masked = mask_lean_source(text)
        assert len(masked) == len(text)
        assert masked.count("\n") == text.count("\n")

    def test_keep_strings_mode(self):
        text = 'def x := "keep" -- drop\n'
        masked = mask_lean_source(text, mask_strings=False)
        assert '"keep"' in masked
        assert "drop" not in masked
