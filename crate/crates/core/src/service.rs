//! Concurrent session service over the protocol and the store.
//!
//! Each session is guarded by its own mutex; branch assignment goes through
//! one counter lock. Every event is appended to the session's log before the
//! in-memory state changes or the caller sees an acknowledgement.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    Branch, BranchCounter, CompletionRecord, CreateSession, Event, EventRecord, Experiment,
    ExplanationView, Phase, ProtocolError, Session, StepDescriptor, Submission, EVENT_VERSION,
};
use crate::rng::seeded;
use crate::store::{Store, StoreError};

pub const DEFAULT_TIMEOUT_MS: u64 = 2 * 60 * 60 * 1000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session")]
    NotFound,
    #[error("idempotency key {0} was already used for a different submission")]
    IdempotencyConflict(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("storage failure: {0}")]
    Store(#[from] StoreError),
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Session tokens: 128 random bits, hex encoded.
pub enum IdSource {
    Random,
    Seeded(Mutex<ChaCha8Rng>),
}

impl IdSource {
    pub fn seeded(seed: u64) -> IdSource {
        IdSource::Seeded(Mutex::new(seeded(seed, 0x1D)))
    }

    pub fn next_token(&self) -> String {
        let mut bytes = [0u8; 16];
        match self {
            IdSource::Random => rand::rng().fill_bytes(&mut bytes),
            IdSource::Seeded(r) => r.lock().expect("id lock").fill(&mut bytes),
        }
        hex::encode(bytes)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    pub timeout_ms: u64,
    pub fsync: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub token: String,
    pub condition_code: String,
}

/// Immediate reply to a submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Acknowledged,
    TrainingFeedback {
        trial: usize,
        score: f64,
        truth: f64,
        ai_prediction: f64,
        explanation: Option<ExplanationView>,
    },
    AiReveal {
        trial: usize,
        ai_prediction: f64,
        explanation: Option<ExplanationView>,
    },
    Recorded {
        trial: usize,
    },
    Completed {
        completion: CompletionRecord,
    },
}

struct Slot {
    session: Session,
    replies: HashMap<String, (Submission, Outcome)>,
}

pub struct ExperimentService {
    exp: Arc<Experiment>,
    store: Store,
    cfg: ServiceConfig,
    clock: Arc<dyn Clock>,
    ids: IdSource,
    sessions: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
    counter: Mutex<BranchCounter>,
}

impl ExperimentService {
    /// Open a store and rebuild every session from its event log.
    pub fn open(
        exp: Arc<Experiment>,
        store_dir: impl AsRef<Path>,
        cfg: ServiceConfig,
        clock: Arc<dyn Clock>,
        ids: IdSource,
    ) -> Result<ExperimentService, ServiceError> {
        let store = Store::open(store_dir, cfg.fsync)?;
        let mut sessions = HashMap::new();
        let mut counter = BranchCounter::default();
        for id in store.session_ids()? {
            let events = store.load_events(&id)?;
            if events.is_empty() {
                continue;
            }
            let session = Session::replay(&events)?;
            if session.is_complete() {
                store.write_result(&session)?;
            }
            if session.state != crate::protocol::State::Abandoned {
                counter.counts[session.branch.index()] += 1;
            }
            sessions.insert(
                id,
                Arc::new(Mutex::new(Slot {
                    session,
                    replies: HashMap::new(),
                })),
            );
        }
        Ok(ExperimentService {
            exp,
            store,
            cfg,
            clock,
            ids,
            sessions: RwLock::new(sessions),
            counter: Mutex::new(counter),
        })
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn branch_counts(&self) -> BranchCounter {
        self.counter.lock().expect("counter lock").clone()
    }

    pub fn create_session(&self, request: &CreateSession) -> Result<Created, ServiceError> {
        request.validate()?;
        let token = self.ids.next_token();
        let mut counter = self.counter.lock().expect("counter lock");
        let branch = counter.next();
        let event = self.exp.created_event(&token, branch, request)?;
        let record = EventRecord {
            v: EVENT_VERSION,
            seq: 0,
            at_ms: self.clock.now_ms(),
            event,
        };
        self.store.append_event(&token, &record)?;
        counter.assign();
        let session = Session::from_created(&record)?;
        self.sessions.write().expect("sessions lock").insert(
            token.clone(),
            Arc::new(Mutex::new(Slot {
                session,
                replies: HashMap::new(),
            })),
        );
        Ok(Created {
            token,
            condition_code: branch.condition_code(),
        })
    }

    fn slot(&self, token: &str) -> Result<Arc<Mutex<Slot>>, ServiceError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(token)
            .cloned()
            .ok_or(ServiceError::NotFound)
    }

    fn persist(&self, slot: &mut Slot, event: Event) -> Result<(), ServiceError> {
        let record = EventRecord {
            v: EVENT_VERSION,
            seq: slot.session.events,
            at_ms: self.clock.now_ms(),
            event,
        };
        self.store.append_event(&slot.session.session_id, &record)?;
        slot.session.apply(&record)?;
        Ok(())
    }

    /// Mark the session abandoned if it has been idle past the timeout.
    fn expire(&self, slot: &mut Slot) -> Result<(), ServiceError> {
        let idle = self
            .clock
            .now_ms()
            .saturating_sub(slot.session.updated_at_ms);
        if slot.session.is_open() && idle > self.cfg.timeout_ms {
            self.persist(slot, Event::Abandoned)?;
            self.counter
                .lock()
                .expect("counter lock")
                .release(slot.session.branch);
        }
        Ok(())
    }

    pub fn step(&self, token: &str) -> Result<StepDescriptor, ServiceError> {
        let slot = self.slot(token)?;
        let mut slot = slot.lock().expect("session lock");
        self.expire(&mut slot)?;
        if slot.session.is_complete() {
            self.store.write_result(&slot.session)?;
        }
        Ok(slot.session.step(&self.exp)?)
    }

    pub fn submit(
        &self,
        token: &str,
        submission: &Submission,
        idempotency_key: Option<&str>,
    ) -> Result<Outcome, ServiceError> {
        let slot = self.slot(token)?;
        let mut slot = slot.lock().expect("session lock");
        if let Some(key) = idempotency_key {
            if let Some((prev, outcome)) = slot.replies.get(key) {
                return if prev == submission {
                    Ok(outcome.clone())
                } else {
                    Err(ServiceError::IdempotencyConflict(key.to_string()))
                };
            }
        }
        self.expire(&mut slot)?;
        let event = slot.session.decide(&self.exp, submission)?;
        let outcome = self.outcome(&slot.session, &event)?;
        self.persist(&mut slot, event)?;
        if slot.session.is_complete() {
            self.store.write_result(&slot.session)?;
        }
        if let Some(key) = idempotency_key {
            slot.replies
                .insert(key.to_string(), (submission.clone(), outcome.clone()));
        }
        Ok(outcome)
    }

    fn outcome(&self, session: &Session, event: &Event) -> Result<Outcome, ServiceError> {
        let view = |phase, id: &str| -> Result<Option<ExplanationView>, ServiceError> {
            Ok(self
                .exp
                .explanations
                .assign(session.branch, phase, id)
                .map_err(ProtocolError::from)?
                .map(ExplanationView::from))
        };
        Ok(match event {
            Event::TrainingAnswered { trial } => Outcome::TrainingFeedback {
                trial: trial.trial,
                score: trial.score,
                truth: trial.truth,
                ai_prediction: trial.ai_prediction,
                explanation: view(Phase::Training, &trial.stimulus_id)?,
            },
            Event::FirstAnswered {
                trial,
                stimulus_id,
                ai_prediction,
                ..
            } => Outcome::AiReveal {
                trial: *trial,
                ai_prediction: *ai_prediction,
                explanation: view(Phase::Testing, stimulus_id)?,
            },
            Event::SecondAnswered { trial, .. } => Outcome::Recorded { trial: *trial },
            Event::Completed { record, .. } => Outcome::Completed {
                completion: record.clone(),
            },
            _ => Outcome::Acknowledged,
        })
    }

    /// Snapshot of a session's full state, for trusted in-process callers.
    pub fn session(&self, token: &str) -> Result<Session, ServiceError> {
        Ok(self
            .slot(token)?
            .lock()
            .expect("session lock")
            .session
            .clone())
    }

    pub fn branch_of(&self, token: &str) -> Result<Branch, ServiceError> {
        Ok(self
            .slot(token)?
            .lock()
            .expect("session lock")
            .session
            .branch)
    }

    /// Abandon every session idle past the timeout; returns how many.
    pub fn sweep(&self) -> Result<usize, ServiceError> {
        let slots: Vec<_> = self
            .sessions
            .read()
            .expect("sessions lock")
            .values()
            .cloned()
            .collect();
        let mut n = 0;
        for s in slots {
            let mut s = s.lock().expect("session lock");
            let was_open = s.session.is_open();
            self.expire(&mut s)?;
            n += usize::from(was_open && !s.session.is_open());
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::testkit::{create_request, experiment};
    use crate::protocol::{Page, State};

    fn service(dir: &Path, clock: Arc<ManualClock>) -> ExperimentService {
        ExperimentService::open(
            Arc::new(experiment()),
            dir,
            ServiceConfig {
                timeout_ms: DEFAULT_TIMEOUT_MS,
                fsync: false,
            },
            clock,
            IdSource::seeded(5),
        )
        .unwrap()
    }

    #[test]
    fn tokens_are_128_bit_hex() {
        let t = IdSource::Random.next_token();
        assert_eq!(t.len(), 32);
        assert!(t.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(IdSource::Random.next_token(), t);
        assert_eq!(
            IdSource::seeded(1).next_token(),
            IdSource::seeded(1).next_token()
        );
    }

    #[test]
    fn idempotent_retries_and_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), Arc::new(ManualClock::new(0)));
        let c = svc.create_session(&create_request()).unwrap();
        let ack = Submission::Acknowledge {
            page: Page::TrainInstructions,
        };
        svc.submit(&c.token, &ack, Some("k1")).unwrap();
        let p = Submission::TrainingPrediction {
            trial: 1,
            prediction: 10.0,
            response_time_ms: 5,
        };
        let first = svc.submit(&c.token, &p, Some("k2")).unwrap();
        assert_eq!(svc.submit(&c.token, &p, Some("k2")).unwrap(), first);
        assert_eq!(svc.session(&c.token).unwrap().training_trials.len(), 1);
        assert!(matches!(
            svc.submit(&c.token, &p, None),
            Err(ServiceError::Protocol(ProtocolError::OutOfOrder { .. }))
        ));
        assert!(matches!(
            svc.submit(&c.token, &ack, Some("k2")),
            Err(ServiceError::IdempotencyConflict(_))
        ));
        assert!(matches!(svc.step("nope"), Err(ServiceError::NotFound)));
    }

    #[test]
    fn timeout_abandons_and_releases_branch() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000));
        let svc = service(dir.path(), clock.clone());
        let c = svc.create_session(&create_request()).unwrap();
        assert_eq!(svc.branch_counts().counts.iter().sum::<u64>(), 1);
        clock.advance(DEFAULT_TIMEOUT_MS);
        assert_eq!(svc.sweep().unwrap(), 0);
        clock.advance(1);
        assert!(matches!(
            svc.step(&c.token).unwrap(),
            StepDescriptor::Abandoned
        ));
        assert_eq!(svc.branch_counts().counts.iter().sum::<u64>(), 0);
        assert!(svc.store().load_results().unwrap().is_empty());

        let reopened = service(dir.path(), clock);
        assert_eq!(reopened.session(&c.token).unwrap().state, State::Abandoned);
        assert_eq!(reopened.branch_counts().counts.iter().sum::<u64>(), 0);
    }

    #[test]
    fn restart_resumes_at_same_step() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(0));
        let svc = service(dir.path(), clock.clone());
        let c = svc.create_session(&create_request()).unwrap();
        svc.submit(
            &c.token,
            &Submission::Acknowledge {
                page: Page::TrainInstructions,
            },
            None,
        )
        .unwrap();
        for t in 1..=3 {
            svc.submit(
                &c.token,
                &Submission::TrainingPrediction {
                    trial: t,
                    prediction: 8.0,
                    response_time_ms: 1,
                },
                None,
            )
            .unwrap();
        }
        let before = serde_json::to_string(&svc.session(&c.token).unwrap()).unwrap();
        let step = svc.step(&c.token).unwrap();
        drop(svc);
        let again = service(dir.path(), clock);
        assert_eq!(
            serde_json::to_string(&again.session(&c.token).unwrap()).unwrap(),
            before
        );
        assert_eq!(again.step(&c.token).unwrap(), step);
        assert_eq!(again.branch_counts().counts[0], 1);
        let c2 = again.create_session(&create_request()).unwrap();
        assert_eq!(again.branch_of(&c2.token).unwrap(), Branch::all()[1]);
    }
}
