#![allow(dead_code)]

use std::sync::Arc;

use iie_core::annotation::{
    generate_form_bundle, AnnotationBundle, DiscardAgreement, FormConfig, FormSource, IcrAnswer, ResponseSubmission,
    TimingLabel, TripletLabel,
};
use iie_core::gateway::{Gateway, GatewayConfig, ManualClock, ReplayBackend, ReplayFile};
use iie_core::pipeline::{Pipeline, PipelineConfig, SentenceRun};
use iie_core::triplet::EventState;

pub const JESSE: &str = "Jesse was pet sitting for Addison, so Jesse came to Addison’s house and walked their dog.";
pub const JESSE_REPLAY: &str = include_str!("../../../core/tests/fixtures/jesse_replay.json");

pub fn jesse_run() -> SentenceRun {
    let gw = Gateway::new(
        Arc::new(ReplayBackend::new(ReplayFile::from_json(JESSE_REPLAY).unwrap())),
        GatewayConfig::default(),
    )
    .with_clock(Arc::new(ManualClock::default()));
    let cfg = PipelineConfig {
        pair_batch_size: 28,
        ..PipelineConfig::default()
    };
    Pipeline::new(gw, cfg).run_sentence(JESSE).unwrap().run
}

pub fn jesse_bundle(form_id: &str) -> AnnotationBundle {
    let run = jesse_run();
    let cfg = FormConfig {
        allow_short: true,
        ..FormConfig::default()
    };
    let src = FormSource {
        sentence_id: "s0001",
        dataset: Some("socialiqa"),
        run: &run,
    };
    generate_form_bundle(form_id, &[src], 7, &cfg).unwrap()
}

/// A complete, valid submission built from the public view only. Every
/// section-a item is labeled wrong, so all attention checks pass.
pub fn answer_all(public: &AnnotationBundle) -> ResponseSubmission {
    let mut sub = ResponseSubmission::default();
    for s in &public.sentences {
        for i in &s.section_a {
            sub.triplet_classification.insert(i.id.clone(), TripletLabel::Wrong);
        }
        for i in &s.section_b {
            let follow = i.follow_up;
            sub.icr.insert(
                i.id.clone(),
                IcrAnswer {
                    discard_agreement: DiscardAgreement::FullyAgree,
                    reason_agreement: follow.then_some(DiscardAgreement::SomewhatAgree),
                    correction_agreement: (follow && i.correction.is_some()).then_some(DiscardAgreement::Disagree),
                },
            );
        }
        for i in &s.section_c {
            sub.event_state.insert(i.id.clone(), EventState::Event);
        }
        for i in &s.section_d {
            sub.timing.insert(i.id.clone(), TimingLabel::Before);
        }
    }
    sub
}
