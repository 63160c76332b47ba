//! Fitness evaluation: request/response contract, a deterministic surrogate
//! evaluator and a client for external trainer processes.

mod external;
pub mod protocol;
mod surrogate;

pub use external::ExternalEvaluator;
pub use surrogate::{surrogate_fitness, surrogate_terms, SurrogateConfig, SurrogateEvaluator, SurrogateTerms};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{Genome, Stage2Genome, StructuralKey};
use crate::weight_store::AssignmentEntry;
use protocol::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Evaluate,
    TrainSupernet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub kind: RequestKind,
    #[serde(with = "stage2_schema")]
    pub genome: Stage2Genome,
    pub assignment: Vec<AssignmentEntry>,
    pub epochs: u32,
    pub dataset: String,
    pub seed: u64,
}

impl EvalRequest {
    /// Every distinct structural key in the request, in position order.
    pub fn keys(&self) -> Vec<StructuralKey> {
        let mut keys: Vec<StructuralKey> = Vec::new();
        for e in &self.assignment {
            if !keys.contains(&e.key) {
                keys.push(e.key);
            }
        }
        keys
    }
}

/// Reply to one [`EvalRequest`]. Exactly one of `fitness` and `error` is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty", with = "blob_list")]
    pub blob_updates: Vec<(StructuralKey, Vec<u8>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalResponse {
    pub fn success(id: u64, fitness: f64, param_count: u64, blob_updates: Vec<(StructuralKey, Vec<u8>)>) -> Self {
        EvalResponse { id, fitness: Some(fitness), param_count: Some(param_count), blob_updates, error: None }
    }

    pub fn failure(id: u64, message: impl Into<String>) -> Self {
        EvalResponse { id, error: Some(message.into()), ..Default::default() }
    }

    /// Checks the fitness-xor-error invariant and the fitness range.
    pub fn check(&self) -> Result<(), String> {
        match (self.fitness, &self.error) {
            (Some(_), Some(_)) => Err("response carries both fitness and error".into()),
            (None, None) => Err("response carries neither fitness nor error".into()),
            (Some(f), None) if !(0.0..=1.0).contains(&f) => Err(format!("fitness {f} outside [0, 1]")),
            _ => Ok(()),
        }
    }
}

/// Either message direction, for tools that read mixed streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Message {
    Request(EvalRequest),
    Response(EvalResponse),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to start evaluator worker `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker {worker}: transport failure: {source}")]
    Transport {
        worker: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("worker {worker} closed its output")]
    Closed { worker: usize },
    #[error("worker {worker}: {source}")]
    Protocol {
        worker: usize,
        #[source]
        source: ProtocolError,
    },
    #[error("response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("request {id} (genome {genome:016x}): invalid response: {reason}")]
    InvalidResponse { id: u64, genome: u64, reason: String },
    #[error("request {id} (genome {genome:016x}): evaluator reported: {message}")]
    Reported { id: u64, genome: u64, message: String },
    #[error("evaluator returned {got} responses for {expected} requests")]
    Count { expected: usize, got: usize },
}

/// A fitness backend. Responses are returned in request order.
pub trait Evaluator {
    fn evaluate_batch(&mut self, requests: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError>;

    fn train_supernet(&mut self, request: &EvalRequest) -> Result<EvalResponse, EvalError> {
        let mut out = self.evaluate_batch(std::slice::from_ref(request))?;
        match out.len() {
            1 => Ok(out.remove(0)),
            got => Err(EvalError::Count { expected: 1, got }),
        }
    }
}

/// Checks a raw response against its request and turns evaluator-reported
/// errors into [`EvalError::Reported`].
pub fn accept_response(request: &EvalRequest, response: EvalResponse) -> Result<EvalResponse, EvalError> {
    if response.id != request.id {
        return Err(EvalError::IdMismatch { expected: request.id, got: response.id });
    }
    let genome = request.genome.digest();
    if let Some(message) = &response.error {
        if response.fitness.is_none() {
            return Err(EvalError::Reported { id: request.id, genome, message: message.clone() });
        }
    }
    response
        .check()
        .map_err(|reason| EvalError::InvalidResponse { id: request.id, genome, reason })?;
    Ok(response)
}

/// Sends a batch and validates every reply against its request.
pub fn evaluate_checked(
    evaluator: &mut dyn Evaluator,
    requests: &[EvalRequest],
) -> Result<Vec<EvalResponse>, EvalError> {
    let responses = evaluator.evaluate_batch(requests)?;
    if responses.len() != requests.len() {
        return Err(EvalError::Count { expected: requests.len(), got: responses.len() });
    }
    requests.iter().zip(responses).map(|(req, resp)| accept_response(req, resp)).collect()
}

mod stage2_schema {
    use super::*;

    pub fn serialize<S: serde::Serializer>(g: &Stage2Genome, s: S) -> Result<S::Ok, S::Error> {
        // the genome file schema; cloning keeps Genome's serializer the single source
        Genome::Stage2(g.clone()).serialize(s)
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Stage2Genome, D::Error> {
        match Genome::deserialize(d)? {
            Genome::Stage2(g) => Ok(g),
            Genome::Stage1(_) => Err(serde::de::Error::custom("expected a stage-2 genome")),
        }
    }
}

/// Serde adapter for `[(key, bytes)]` as `[["<hexkey>", "<base64>"], ...]`.
pub mod blob_list {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::genome::StructuralKey;

    pub fn serialize<S: Serializer>(blobs: &[(StructuralKey, Vec<u8>)], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<(String, String)> =
            blobs.iter().map(|(k, b)| (k.to_hex(), STANDARD.encode(b))).collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(StructuralKey, Vec<u8>)>, D::Error> {
        let encoded: Vec<(String, String)> = Vec::deserialize(d)?;
        encoded
            .into_iter()
            .map(|(k, b)| {
                let key = k.parse().map_err(serde::de::Error::custom)?;
                let bytes = STANDARD.decode(b.as_bytes()).map_err(serde::de::Error::custom)?;
                Ok((key, bytes))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{expand_to_stage2, structural_key, DepthBounds, Stage1Genome};
    use crate::search_space::CellLibrary;
    use crate::weight_store::WeightSource;

    pub(crate) fn sample_request(id: u64) -> EvalRequest {
        let lib = CellLibrary::default();
        let g = expand_to_stage2(&Stage1Genome::from_codes(&[(0, 2), (0, 6), (1, 3)]), &lib, DepthBounds::new(1, 8))
            .unwrap();
        let assignment = (0..g.depth())
            .map(|p| AssignmentEntry { key: structural_key(p, &g), source: WeightSource::Inherited })
            .collect();
        EvalRequest {
            id,
            kind: RequestKind::Evaluate,
            genome: g,
            assignment,
            epochs: 10,
            dataset: "fashion-mnist-1k".into(),
            seed: 42,
        }
    }

    #[test]
    fn request_wire_shape() {
        let req = sample_request(3);
        let v: serde_json::Value = serde_json::from_slice(&protocol::encode(&req)).unwrap();
        assert_eq!(v["id"], 3);
        assert_eq!(v["kind"], "evaluate");
        assert_eq!(v["genome"]["stage"], 2);
        assert_eq!(v["epochs"], 10);
        assert_eq!(v["dataset"], "fashion-mnist-1k");
        assert_eq!(v["assignment"][0]["source"], "inherited");
        assert_eq!(v["assignment"][0]["key"].as_str().unwrap().len(), 18);
    }

    #[test]
    fn response_wire_shape() {
        let key: StructuralKey = "02000000000000abcd".parse().unwrap();
        let r = EvalResponse::success(7, 0.873, 861000, vec![(key, vec![1, 2, 3])]);
        let line = String::from_utf8(protocol::encode(&r)).unwrap();
        assert_eq!(
            line,
            "{\"id\":7,\"fitness\":0.873,\"param_count\":861000,\"blob_updates\":[[\"02000000000000abcd\",\"AQID\"]]}\n"
        );
        let e = EvalResponse::failure(8, "out of memory");
        assert_eq!(String::from_utf8(protocol::encode(&e)).unwrap(), "{\"id\":8,\"error\":\"out of memory\"}\n");
    }

    #[test]
    fn message_kinds_round_trip() {
        let mut supernet = sample_request(1);
        supernet.kind = RequestKind::TrainSupernet;
        let key: StructuralKey = "05ffffffffffffffff".parse().unwrap();
        let msgs = vec![
            Message::Request(sample_request(0)),
            Message::Request(supernet),
            Message::Response(EvalResponse::success(2, 0.1 + 0.2, 10, vec![(key, vec![0, 255])])),
            Message::Response(EvalResponse::failure(3, "boom")),
        ];
        for m in msgs {
            let back: Message = protocol::decode(&protocol::encode(&m), 1).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn response_invariants() {
        assert!(EvalResponse::success(1, 0.5, 1, vec![]).check().is_ok());
        assert!(EvalResponse::success(1, 1.5, 1, vec![]).check().is_err());
        assert!(EvalResponse { id: 1, ..Default::default() }.check().is_err());
        let mut both = EvalResponse::success(1, 0.5, 1, vec![]);
        both.error = Some("x".into());
        assert!(both.check().is_err());
    }

    #[test]
    fn reported_error_names_request_and_genome() {
        let req = sample_request(11);
        let err = accept_response(&req, EvalResponse::failure(11, "cuda error")).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("request 11"), "{text}");
        assert!(text.contains(&format!("{:016x}", req.genome.digest())), "{text}");
        assert!(text.contains("cuda error"));
        assert!(matches!(
            accept_response(&req, EvalResponse::success(12, 0.5, 1, vec![])),
            Err(EvalError::IdMismatch { expected: 11, got: 12 })
        ));
    }
}
