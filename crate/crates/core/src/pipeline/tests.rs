use std::sync::Arc;

use super::*;
use crate::gateway::{GatewayConfig, ManualClock, ReplayBackend, ReplayEntry, ReplayFile};
use crate::triplet::{parse_triplet, EntityType, EventState};

fn t(s: &str) -> Triplet {
    parse_triplet(s).unwrap()
}

fn pipeline(script: &[(TemplateId, &str)]) -> Pipeline {
    pipeline_with(script, PipelineConfig::default())
}

fn pipeline_with(script: &[(TemplateId, &str)], config: PipelineConfig) -> Pipeline {
    let file = ReplayFile::from_entries(
        script
            .iter()
            .map(|(step, reply)| ReplayEntry::reply(None, *step, *reply))
            .collect(),
    );
    let gw = Gateway::new(Arc::new(ReplayBackend::new(file)), GatewayConfig::default())
        .with_clock(Arc::new(ManualClock::default()));
    Pipeline::new(gw, config)
}

fn run_for(sentence: &str) -> SentenceRun {
    SentenceRun {
        sentence: sentence.into(),
        ..SentenceRun::default()
    }
}

const CAMERON: &str = "Cameron decided to have a barbecue and gathered her friends together.";

#[test]
fn entities_from_example_reply() {
    let p = pipeline(&[(
        TemplateId::EntityExtraction,
        "Cameron <per>; barbecue <msc>; friends <per>",
    )]);
    let mut run = run_for(CAMERON);
    let es = p.extract_entities(&mut run).unwrap();
    assert_eq!(
        es,
        vec![
            Entity::new("Cameron", EntityType::Per),
            Entity::new("barbecue", EntityType::Msc),
            Entity::new("friends", EntityType::Per),
        ]
    );
    assert!(run.transcript.entries()[0]
        .request
        .rendered_prompt
        .ends_with(&format!("Text: {CAMERON}\nEntities:")));
}

#[test]
fn entities_duplicates_renamed_and_empty_sentence() {
    let p = pipeline(&[(TemplateId::EntityExtraction, "Entities: Max <per>; Max <per>")]);
    let mut run = run_for("Max met Max.");
    let es = p.extract_entities(&mut run).unwrap();
    assert_eq!(es[1].name, "Max (2)");
    assert_eq!(run.lints.len(), 1);

    let mut empty = run_for("  ");
    assert!(matches!(
        p.extract_entities(&mut empty),
        Err(PipelineError::EmptySentence)
    ));
    assert!(empty.transcript.is_empty());
}

#[test]
fn explicit_nested_record() {
    let p = pipeline(&[(
        TemplateId::ExplicitExtraction,
        "[(Lewis, mentions, (Lewis, wouldLike, (Lewis, isA, musician))) `Lewis mentioned he would have liked to be a musician`]",
    )]);
    let mut run = run_for("Lewis mentioned he would have liked to be a musician as a kid.");
    let entities = [
        Entity::new("Lewis", EntityType::Per),
        Entity::new("musician", EntityType::Occ),
    ];
    let recs = p.extract_explicit(&mut run, &entities).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].triplet.depth(), 3);
    assert_eq!(recs[0].status, RecordStatus::Validated);
    assert!(recs[0].provenance.is_explicit());
    let prompt = &run.transcript.entries()[0].request.rendered_prompt;
    assert!(prompt.ends_with("Entities: [Lewis, musician]\nTriplets:"));
}

#[test]
fn explicit_empty_and_missing_snippet() {
    let p = pipeline(&[
        (TemplateId::ExplicitExtraction, "[]"),
        (TemplateId::ExplicitExtraction, "[(a, r, b)]"),
    ]);
    let mut run = run_for("s.");
    assert!(p.extract_explicit(&mut run, &[]).unwrap().is_empty());
    let recs = p.extract_explicit(&mut run, &[]).unwrap();
    assert_eq!(recs[0].provenance, Provenance::Explicit { snippet: "s.".into() });
    assert!(run.lints.iter().any(|l| l.message.contains("no snippet")));
}

#[test]
fn implicit_prompt_is_conditioned_on_sentence_and_entities_only() {
    let p = pipeline(&[(
        TemplateId::ImplicitExtraction,
        "[(Bernie, caresAbout, studying), (Bernie, stops, (Bernie, studies, <none>)), (Bernie, answers, call)]",
    )]);
    let sentence = "Bernie was studying, but then he was interrupted by an incoming call.";
    let mut run = run_for(sentence);
    let entities = [
        Entity::new("Bernie", EntityType::Per),
        Entity::new("call", EntityType::Msc),
    ];
    let recs = p.extract_implicit(&mut run, &entities).unwrap();
    assert!(recs
        .iter()
        .any(|r| r.triplet == t("(Bernie, stops, (Bernie, studies, <none>))")));
    assert!(recs.iter().all(|r| r.status == RecordStatus::Candidate));
    let prompt = &run.transcript.entries()[0].request.rendered_prompt;
    let tail = format!("Text: {sentence}\nEntities: [Bernie, call]\nTriplets:");
    assert!(prompt.ends_with(&tail));
}

#[test]
fn duplicate_verdicts() {
    let p = pipeline(&[
        (TemplateId::DuplicateRemoval, "yes"),
        (TemplateId::DuplicateRemoval, "no"),
        (TemplateId::DuplicateRemoval, "maybe"),
        (TemplateId::DuplicateRemoval, "perhaps"),
    ]);
    let mut run = run_for("s");
    let accepted = [t("(Jesse, walks, dog)")];
    assert!(p
        .remove_duplicate(&mut run, &t("(Jesse, walks, dog)"), &accepted)
        .unwrap());
    assert!(!p
        .remove_duplicate(&mut run, &t("(Jesse, likes, dogs)"), &accepted)
        .unwrap());
    assert!(!p
        .remove_duplicate(&mut run, &t("(Jesse, likes, dogs)"), &accepted)
        .unwrap());
    assert_eq!(run.lints.len(), 1);
    assert_eq!(run.transcript.len(), 4);
}

#[test]
fn challenge_examples() {
    let p = pipeline(&[
        (TemplateId::InferenceChallenge, "no; being classmates does not necessarily imply friendship."),
        (TemplateId::InferenceChallenge, "CanBeInferred: yes"),
        (TemplateId::InferenceChallenge, "no; one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen twenty twentyone"),
    ]);
    let mut run = run_for("Leah and Fawn have been classmates for 5 years.");
    let r = p.challenge_inference(&mut run, &t("(Leah, isFriendOf, Fawn)")).unwrap();
    assert_eq!(r.verdict, Verdict::No);
    assert_eq!(
        r.explanation.as_deref(),
        Some("being classmates does not necessarily imply friendship.")
    );
    let r = p
        .challenge_inference(&mut run, &t("(Jesse, takesCareOf, dog)"))
        .unwrap();
    assert_eq!(r.verdict, Verdict::Yes);
    assert!(run.lints.is_empty());
    let r = p.challenge_inference(&mut run, &t("(a, b, c)")).unwrap();
    assert_eq!(r.word_count(), 21);
    assert_eq!(run.lints.len(), 1);
}

#[test]
fn bare_no_triggers_reprompt() {
    let p = pipeline(&[
        (TemplateId::InferenceChallenge, "no"),
        (TemplateId::InferenceChallenge, "no; unsupported."),
    ]);
    let mut run = run_for("s");
    let r = p.challenge_inference(&mut run, &t("(a, b, c)")).unwrap();
    assert_eq!(r.explanation.as_deref(), Some("unsupported."));
    assert_eq!(run.transcript.len(), 2);
}

#[test]
fn correction_examples() {
    let p = pipeline(&[
        (TemplateId::InferenceCorrection, "(Addison, livesIn, house)"),
        (TemplateId::InferenceCorrection, "none"),
    ]);
    let mut run = run_for("s");
    let c = p
        .correct_inference(
            &mut run,
            &t("(Addison, owns, house)"),
            "The text does not imply that Addison is the legal owner of the house.",
        )
        .unwrap();
    assert_eq!(c, Some(t("(Addison, livesIn, house)")));
    let prompt = &run.transcript.entries()[0].request.rendered_prompt;
    assert!(prompt.ends_with("Inference: (Addison, owns, house)\nExplanation: The text does not imply that Addison is the legal owner of the house.\nCorrection:"));
    let c = p
        .correct_inference(
            &mut run,
            &t("(Leah, isClassmateOf, Fawn)"),
            "Being classmates does not necessarily imply friendship.",
        )
        .unwrap();
    assert_eq!(c, None);
}

#[test]
fn explanation_subset() {
    let p = pipeline(&[
        (
            TemplateId::InferenceExplanation,
            "[(Jesse, petSittingFor, Addison), (Jesse, cameTo, house)]",
        ),
        (TemplateId::InferenceExplanation, "Premise: []"),
    ]);
    let mut run = run_for("s");
    let explicit = [
        t("(Jesse, petSittingFor, Addison)"),
        t("(Jesse, cameTo, house)"),
        t("(Jesse, walked, dog)"),
        t("(Addison, owns, dog)"),
    ];
    let premises = p
        .explain_inference(&mut run, &t("(dog, isAt, house)"), &explicit)
        .unwrap();
    assert_eq!(
        premises,
        vec![t("(Jesse, petSittingFor, Addison)"), t("(Jesse, cameTo, house)")]
    );
    assert!(p
        .explain_inference(&mut run, &t("(cat, needs, (cat, drinks, water))"), &explicit)
        .unwrap()
        .is_empty());

    let p = pipeline(&[(
        TemplateId::InferenceExplanation,
        "[(Jesse, petSittingFor, Addison), (Jesse, flies, plane)]",
    )]);
    let premises = p
        .explain_inference(&mut run, &t("(dog, isAt, house)"), &explicit)
        .unwrap();
    assert_eq!(premises.len(), 1);
    assert!(run.lints.iter().any(|l| l.message.contains("flies")));
}

#[test]
fn grounding_examples() {
    let p = pipeline(&[(
        TemplateId::EventStateGrounding,
        "[(Aubrey, invites, Kendall) <event> `none`; (Kendall, attends, recital) <event> `next Wednesday`; (recital, locatedAt, town square) <state> `none`]",
    )]);
    let mut run = run_for("Aubrey tried and got Kendall to go to the dance recital next Wednesday at the town square.");
    let v = [
        t("(Aubrey, invites, Kendall)"),
        t("(Kendall, attends, recital)"),
        t("(recital, locatedAt, town square)"),
    ];
    let tags = p.classify_and_ground(&mut run, &v).unwrap();
    assert_eq!(
        tags[1].tag,
        EventStateTag {
            kind: EventState::Event,
            time_ref: Some("next Wednesday".into())
        }
    );
    assert_eq!(tags[2].tag.kind, EventState::State);
    assert_eq!(tags[2].tag.time_ref, None);
}

#[test]
fn grounding_echo_mismatch() {
    let reply = "[(Jesse, likes, dogs) <state> `none`]";
    let p = pipeline(&[
        (TemplateId::EventStateGrounding, reply),
        (TemplateId::EventStateGrounding, reply),
    ]);
    let mut run = run_for("s");
    let v = [t("(Jesse, likes, dogs)"), t("(Jesse, walks, dog)")];
    assert!(matches!(
        p.classify_and_ground(&mut run, &v),
        Err(PipelineError::EchoMismatch(_))
    ));
    assert_eq!(run.transcript.len(), 2);

    let p = pipeline(&[(TemplateId::EventStateGrounding, "[(Jesse, likes, dogs) <state> `none`]")]);
    let tags = p.classify_and_ground(&mut run, &v[..1]).unwrap();
    assert_eq!(
        tags[0].tag,
        EventStateTag {
            kind: EventState::State,
            time_ref: None
        }
    );
}

#[test]
fn cameron_pairs_both_orders() {
    let p = pipeline(&[
        (
            TemplateId::TemporalRelations,
            "[((Cameron, hosted, barbecue), (Cameron, gathered, friends)) -> <after>]",
        ),
        (
            TemplateId::TemporalRelations,
            "[((Cameron, gathered, friends), (Cameron, hosted, barbecue)) -> <before>]",
        ),
    ]);
    let mut run = run_for(CAMERON);
    let v = [t("(Cameron, hosted, barbecue)"), t("(Cameron, gathered, friends)")];
    let tags = p.extract_pairwise_relations(&mut run, &v).unwrap();
    assert_eq!(tags[&(0, 1)], TemporalTag::After);
    assert_eq!(tags[&(1, 0)], TemporalTag::Before);
    assert_eq!(run.transcript.len(), 2);
    assert_eq!(
        reconcile_relation_pair(tags[&(0, 1)], tags[&(1, 0)]),
        TemporalTag::After
    );
}

#[test]
fn pairs_single_and_missing() {
    let p = pipeline(&[]);
    let mut run = run_for("s");
    assert!(p
        .extract_pairwise_relations(&mut run, &[t("(a, b, c)")])
        .unwrap()
        .is_empty());
    assert!(run.transcript.is_empty());

    let cfg = PipelineConfig {
        split_pair_orders: false,
        ..PipelineConfig::default()
    };
    let p = pipeline_with(
        &[
            (TemplateId::TemporalRelations, "[((a, r, b), (c, r, d)) -> <before>]"),
            (TemplateId::TemporalRelations, "garbage"),
        ],
        cfg,
    );
    let tags = p
        .extract_pairwise_relations(&mut run, &[t("(a, r, b)"), t("(c, r, d)")])
        .unwrap();
    assert_eq!(tags[&(0, 1)], TemporalTag::Before);
    assert_eq!(tags[&(1, 0)], TemporalTag::None);
    assert_eq!(run.transcript.len(), 2);
    assert!(run.lints.iter().any(|l| l.message.contains("using none")));
}

#[test]
fn pair_batching() {
    assert_eq!(pair_batches(4, 100, false).concat().len(), 12);
    assert_eq!(pair_batches(1, 12, true).len(), 0);
    let batches = pair_batches(5, 3, true);
    let all: Vec<_> = batches.concat();
    assert_eq!(all.len(), 20);
    let unique: HashSet<_> = all.iter().collect();
    assert_eq!(unique.len(), 20);
    for b in &batches {
        assert!(b.len() <= 3);
        for &(i, j) in b {
            assert!(!b.contains(&(j, i)), "both orders of ({i}, {j}) in one batch");
        }
    }
}

#[test]
fn reconciliation_table() {
    use TemporalTag::*;
    for a in TemporalTag::ALL {
        for b in TemporalTag::ALL {
            let expected = match (a, b) {
                (Before, After) => Before,
                (After, Before) => After,
                (While, While) => While,
                _ => None,
            };
            assert_eq!(reconcile_relation_pair(a, b), expected);
        }
    }
}

#[test]
fn implicit_empty_gives_explicit_tier_only() {
    let p = pipeline(&[
        (TemplateId::EntityExtraction, "Perry <per>"),
        (
            TemplateId::ExplicitExtraction,
            "[(Perry, runs, <none>) `Perry was running`]",
        ),
        (TemplateId::ImplicitExtraction, "[]"),
        (
            TemplateId::EventStateGrounding,
            "[(Perry, runs, <none>) <event> `none`]",
        ),
    ]);
    let out = p.run_sentence("Perry was running.").unwrap();
    assert_eq!(out.kg.relational.len(), 1);
    assert!(out.kg.relational[0].provenance.is_explicit());
    assert!(out.kg.temporal.is_empty());
}

#[test]
fn failure_keeps_partial_transcript() {
    let p = pipeline(&[
        (TemplateId::EntityExtraction, "Perry <per>"),
        (
            TemplateId::ExplicitExtraction,
            "[(Perry, runs, <none>) `Perry was running`]",
        ),
    ]);
    let err = p.run_sentence("Perry was running.").unwrap_err();
    assert!(matches!(
        err.error,
        PipelineError::Gateway(GatewayError::ReplayExhausted { .. })
    ));
    assert_eq!(err.partial.transcript.len(), 3);
    assert_eq!(err.partial.records.len(), 1);
}

#[test]
fn correction_duplicate_ends_chain() {
    let p = pipeline(&[
        (TemplateId::EntityExtraction, "a <per>"),
        (TemplateId::ExplicitExtraction, "[(a, r, b) `x`]"),
        (TemplateId::ImplicitExtraction, "[(a, q, b)]"),
        (TemplateId::DuplicateRemoval, "no"),
        (TemplateId::DuplicateRemoval, "no"),
        (TemplateId::InferenceChallenge, "no; weak."),
        (TemplateId::InferenceCorrection, "(a, r, b)"),
        (TemplateId::EventStateGrounding, "[(a, r, b) <state> `none`]"),
    ]);
    let out = p.run_sentence("a r b.").unwrap();
    let chain = out.run.chain(0);
    assert_eq!(chain.len(), 2);
    assert_eq!(chain[1].status, RecordStatus::DiscardedDuplicate);
    assert!(out.run.lints.iter().any(|l| l.message.contains("verbatim")));
    assert_eq!(out.kg.relational.len(), 1);
}
