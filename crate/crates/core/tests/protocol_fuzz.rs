//! Evaluator wire messages survive encoding and arbitrarily chunked decoding
//! bit-exactly.

use cellevo::evaluation::protocol::{decode, encode, LineDecoder, ProtocolError};
use cellevo::evaluation::{EvalRequest, EvalResponse, Message, RequestKind};
use cellevo::evolution::{fine_mutation, prune, random_stage1, FineMutationMode, SearchRng};
use cellevo::genome::{expand_to_stage2, structural_key, DepthBounds, StructuralKey};
use cellevo::search_space::CellLibrary;
use cellevo::weight_store::{AssignmentEntry, WeightSource};
use rand::Rng;

const MESSAGES: usize = 1000;
const MIB: usize = 1 << 20;

fn random_bytes(rng: &mut SearchRng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill(&mut v[..]);
    v
}

fn random_key(rng: &mut SearchRng) -> StructuralKey {
    StructuralKey { cell_code: rng.gen_range(1..=8), graph_hash: rng.gen() }
}

fn random_text(rng: &mut SearchRng) -> String {
    const PIECES: [&str; 8] = ["cuda out of memory", "\n", "\"quoted\"", "\\", "tab\t", "ünïcødé", "日本", "\u{1}"];
    (0..rng.gen_range(1..6)).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn random_request(rng: &mut SearchRng, lib: &CellLibrary, id: u64) -> EvalRequest {
    let bounds = DepthBounds::new(1, 12);
    let mut genome = expand_to_stage2(&random_stage1(bounds, rng), lib, bounds).unwrap();
    if rng.gen_bool(0.5) {
        genome = fine_mutation(&genome, FineMutationMode::Both, rng);
    }
    if rng.gen_bool(0.5) {
        genome = prune(&genome, rng).genome().cloned().unwrap_or(genome);
    }
    let assignment = (0..genome.depth())
        .map(|p| AssignmentEntry {
            key: structural_key(p, &genome),
            source: if rng.gen_bool(0.5) { WeightSource::Inherited } else { WeightSource::Fresh },
        })
        .collect();
    EvalRequest {
        id,
        kind: if rng.gen_bool(0.1) { RequestKind::TrainSupernet } else { RequestKind::Evaluate },
        genome,
        assignment,
        epochs: rng.gen_range(0..200),
        dataset: random_text(rng),
        seed: rng.gen(),
    }
}

fn random_response(rng: &mut SearchRng, id: u64, big: bool) -> EvalResponse {
    if !big && rng.gen_bool(0.15) {
        return EvalResponse::failure(id, random_text(rng));
    }
    let count = if big { 1 } else { rng.gen_range(0..4) };
    let blobs = (0..count)
        .map(|_| {
            let len = if big { MIB } else { rng.gen_range(0..300) };
            (random_key(rng), random_bytes(rng, len))
        })
        .collect();
    // arbitrary doubles in [0, 1], including subnormals and the endpoints
    let fitness = match rng.gen_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        2 => f64::MIN_POSITIVE / 3.0,
        _ => rng.gen::<f64>(),
    };
    EvalResponse::success(id, fitness, rng.gen(), blobs)
}

fn corpus(seed: u64) -> Vec<Message> {
    let lib = CellLibrary::default();
    let mut rng = SearchRng::seed_from_u64(seed);
    (0..MESSAGES as u64)
        .map(|id| {
            if id % 200 == 7 {
                Message::Response(random_response(&mut rng, id, true))
            } else if rng.gen_bool(0.5) {
                Message::Request(random_request(&mut rng, &lib, id))
            } else {
                Message::Response(random_response(&mut rng, id, false))
            }
        })
        .collect()
}

fn chunk_sizes(rng: &mut SearchRng, total: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = match rng.gen_range(0..4) {
            0 => 1,
            1 => rng.gen_range(1..64),
            2 => rng.gen_range(1..8192),
            _ => rng.gen_range(1..300_000),
        }
        .min(left);
        sizes.push(n);
        left -= n;
    }
    sizes
}

#[test]
fn corpus_round_trips_under_random_chunking() {
    let messages = corpus(11);
    let encoded: Vec<Vec<u8>> = messages.iter().map(encode).collect();
    let stream: Vec<u8> = encoded.concat();
    assert!(stream.len() > 5 * MIB);
    assert!(encoded.iter().all(|line| line.iter().filter(|&&b| b == b'\n').count() == 1));

    let mut rng = SearchRng::seed_from_u64(99);
    for _ in 0..3 {
        let mut decoder = LineDecoder::new();
        let mut decoded: Vec<Message> = Vec::new();
        let mut offset = 0;
        for n in chunk_sizes(&mut rng, stream.len()) {
            for r in decoder.feed::<Message>(&stream[offset..offset + n]) {
                decoded.push(r.unwrap());
            }
            offset += n;
        }
        decoder.finish().unwrap();
        assert_eq!(decoded.len(), messages.len());
        for (i, (got, want)) in decoded.iter().zip(&messages).enumerate() {
            assert_eq!(got, want, "message {i}");
            assert_eq!(encode(got), encoded[i], "message {i} re-encodes differently");
        }
    }
}

#[test]
fn one_mebibyte_blob_is_bit_exact() {
    let mut rng = SearchRng::seed_from_u64(3);
    let resp = random_response(&mut rng, 5, true);
    let line = encode(&resp);
    let back: EvalResponse = decode(&line, 1).unwrap();
    assert_eq!(back.blob_updates[0].1.len(), MIB);
    assert_eq!(back, resp);
}

#[test]
fn truncated_stream_is_reported() {
    let mut rng = SearchRng::seed_from_u64(4);
    let line = encode(&random_response(&mut rng, 1, false));
    let mut decoder = LineDecoder::new();
    assert!(decoder.feed::<EvalResponse>(&line[..line.len() - 1]).is_empty());
    assert!(matches!(decoder.finish(), Err(ProtocolError::Truncated { line: 1 })));
}

#[test]
fn garbage_lines_are_errors_with_line_numbers() {
    let mut decoder = LineDecoder::new();
    let mut input = encode(&EvalResponse::success(1, 0.5, 10, Vec::new()));
    input.extend_from_slice(b"{\"id\": 2, \"fitness\": \n");
    input.extend_from_slice(&[0xff, 0xfe, b'\n']);
    input.extend_from_slice(&encode(&EvalResponse::failure(3, "x")));
    let out = decoder.feed::<EvalResponse>(&input);
    assert_eq!(out.len(), 4);
    assert!(out[0].is_ok() && out[3].is_ok());
    assert!(matches!(out[1], Err(ProtocolError::Malformed { line: 2, .. })));
    assert!(matches!(out[2], Err(ProtocolError::InvalidUtf8 { line: 3 })));
}
