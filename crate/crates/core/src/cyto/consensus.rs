use crate::cyto::LabeledSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Consensus {
    pub sample: LabeledSample,
    /// Events where the vote was tied and the lowest class index won.
    pub ties: usize,
}

/// Per-event majority vote across experts gating the same events.
pub fn consensus_labels(experts: &[&LabeledSample]) -> Result<Consensus> {
    let [first, rest @ ..] = experts else {
        return Err(Error::Alignment("no expert gatings given".into()));
    };
    if rest.is_empty() {
        return Err(Error::Alignment("consensus needs at least two experts".into()));
    }
    let n = first.n_events();
    for e in rest {
        if e.n_events() != n {
            return Err(Error::Alignment(format!(
                "expert {:?} has {} events, expert {:?} has {n}",
                e.expert_id,
                e.n_events(),
                first.expert_id
            )));
        }
        if e.class_names() != first.class_names() {
            return Err(Error::Alignment("experts use different class sets".into()));
        }
    }
    let c = first.n_classes();
    let mut votes = vec![0usize; c];
    let mut labels = Vec::with_capacity(n);
    let mut ties = 0;
    for i in 0..n {
        votes.iter_mut().for_each(|v| *v = 0);
        for e in experts {
            votes[e.labels()[i]] += 1;
        }
        let best = *votes.iter().max().expect("at least one class");
        let winner = votes.iter().position(|&v| v == best).expect("max exists");
        if votes.iter().filter(|&&v| v == best).count() > 1 {
            ties += 1;
        }
        labels.push(winner);
    }
    let sample = LabeledSample::new(first.events.clone(), labels, first.class_names().to_vec())?;
    Ok(Consensus {
        sample: sample.with_expert("consensus"),
        ties,
    })
}
