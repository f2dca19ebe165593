//! Encoder output against frames assembled byte by byte in this file.

use fedrs::protocol::{decode_message, encode_message, Decoded, ProtocolError};
use fedrs::{ConfigMap, ConfigValue, DisconnectReason, Message, SeededRng, Tensor, TensorData, Weights};

#[derive(Default)]
struct Bytes(Vec<u8>);

impl Bytes {
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u16(mut self, v: u16) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn f64(mut self, v: f64) -> Self {
        self.0.extend_from_slice(&v.to_bits().to_be_bytes());
        self
    }
    fn str(self, s: &str) -> Self {
        let mut b = self.u16(s.len() as u16);
        b.0.extend_from_slice(s.as_bytes());
        b
    }
    fn raw(mut self, v: &[u8]) -> Self {
        self.0.extend_from_slice(v);
        self
    }
    fn config(self, entries: &[(&str, ConfigValue)]) -> Self {
        let mut b = self.u16(entries.len() as u16);
        for (k, v) in entries {
            b = b.str(k);
            b = match v {
                ConfigValue::Int(i) => b.u8(0).u64(*i as u64),
                ConfigValue::Float(f) => b.u8(1).f64(*f),
                ConfigValue::Str(s) => b.u8(2).str(s),
                ConfigValue::Bool(x) => b.u8(3).u8(*x as u8),
            };
        }
        b
    }
    fn weights(self, w: &Weights) -> Self {
        let mut b = self.u32(w.len() as u32);
        for t in w.tensors() {
            b = b.str(t.name());
            b = match t.data() {
                TensorData::F32(_) => b.u8(0),
                TensorData::F64(_) => b.u8(1),
            };
            b = b.u8(t.shape().len() as u8);
            for &e in t.shape() {
                b = b.u32(e as u32);
            }
            match t.data() {
                TensorData::F32(v) => {
                    for x in v {
                        b.0.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        b.0.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        b
    }
    fn frame(self, kind: u8) -> Vec<u8> {
        Bytes::default()
            .raw(b"FLWR")
            .u8(1)
            .u8(kind)
            .u32(self.0.len() as u32)
            .raw(&self.0)
            .0
    }
}

fn config_of(entries: &[(&str, ConfigValue)]) -> ConfigMap {
    let mut c = ConfigMap::new();
    for (k, v) in entries {
        c.insert(*k, v.clone());
    }
    c
}

fn reason_tag(r: DisconnectReason) -> u8 {
    match r {
        DisconnectReason::ReconnectLater => 0,
        DisconnectReason::PowerStateChange => 1,
        DisconnectReason::Shutdown => 2,
        DisconnectReason::Error => 3,
    }
}

/// Independent encoding of `m`.
fn expected_frame(m: &Message) -> Vec<u8> {
    let entries = |c: &ConfigMap| -> Vec<(String, ConfigValue)> {
        c.iter().map(|(k, v)| (k.to_owned(), v.clone())).collect()
    };
    let cfg = |b: Bytes, c: &ConfigMap| {
        let e = entries(c);
        let refs: Vec<(&str, ConfigValue)> = e.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        b.config(&refs)
    };
    match m {
        Message::ClientHello {
            client_name,
            capabilities,
        } => cfg(Bytes::default().str(client_name), capabilities).frame(1),
        Message::GetWeightsIns => Bytes::default().frame(2),
        Message::GetWeightsRes { weights } => Bytes::default().weights(weights).frame(3),
        Message::FitIns { weights, config } => cfg(Bytes::default().weights(weights), config).frame(4),
        Message::FitRes {
            weights,
            num_examples,
            metrics,
        } => cfg(Bytes::default().weights(weights).u64(*num_examples), metrics).frame(5),
        Message::EvaluateIns { weights, config } => {
            cfg(Bytes::default().weights(weights), config).frame(6)
        }
        Message::EvaluateRes {
            loss,
            num_examples,
            metrics,
        } => cfg(Bytes::default().f64(*loss).u64(*num_examples), metrics).frame(7),
        Message::ReconnectIns { seconds } => Bytes::default().u32(*seconds).frame(8),
        Message::DisconnectRes { reason } => Bytes::default().u8(reason_tag(*reason)).frame(9),
        Message::ErrorRes { code, detail } => Bytes::default().u16(*code).str(detail).frame(10),
    }
}

fn random_weights(rng: &mut SeededRng) -> Weights {
    let n = rng.below(4) as usize;
    let tensors = (0..n)
        .map(|i| {
            let rank = rng.below(4) as usize;
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(3) as usize).collect();
            let len: usize = shape.iter().product();
            let name = format!("layer{i}/kernel");
            if rng.below(2) == 0 {
                Tensor::from_f32(name, shape, (0..len).map(|_| rng.uniform(-5.0, 5.0) as f32).collect())
            } else {
                Tensor::from_f64(name, shape, (0..len).map(|_| rng.standard_normal()).collect())
            }
            .unwrap()
        })
        .collect();
    Weights::new(tensors).unwrap()
}

fn random_config(rng: &mut SeededRng) -> ConfigMap {
    let mut c = ConfigMap::new();
    for i in 0..rng.below(5) {
        let key = format!("k{i}");
        match rng.below(4) {
            0 => c.insert(key, rng.next_u64() as i64),
            1 => c.insert(key, rng.standard_normal()),
            2 => c.insert(key, format!("välue-{}", rng.below(100))),
            _ => c.insert(key, rng.below(2) == 1),
        }
    }
    c
}

/// At least 50 messages, every variant represented several times.
fn corpus() -> Vec<Message> {
    let mut rng = SeededRng::new(99);
    let reasons = [
        DisconnectReason::ReconnectLater,
        DisconnectReason::PowerStateChange,
        DisconnectReason::Shutdown,
        DisconnectReason::Error,
    ];
    let mut out = Vec::new();
    for i in 0..6u64 {
        out.push(Message::ClientHello {
            client_name: format!("client-{i}"),
            capabilities: random_config(&mut rng),
        });
        out.push(Message::GetWeightsIns);
        out.push(Message::GetWeightsRes {
            weights: random_weights(&mut rng),
        });
        out.push(Message::FitIns {
            weights: random_weights(&mut rng),
            config: random_config(&mut rng),
        });
        out.push(Message::FitRes {
            weights: random_weights(&mut rng),
            num_examples: rng.below(1000),
            metrics: random_config(&mut rng),
        });
        out.push(Message::EvaluateIns {
            weights: random_weights(&mut rng),
            config: random_config(&mut rng),
        });
        out.push(Message::EvaluateRes {
            loss: rng.uniform(0.0, 3.0),
            num_examples: 1 + rng.below(1000),
            metrics: random_config(&mut rng),
        });
        out.push(Message::ReconnectIns {
            seconds: rng.below(100) as u32,
        });
        out.push(Message::DisconnectRes {
            reason: reasons[i as usize % 4],
        });
        out.push(Message::ErrorRes {
            code: rng.below(5) as u16,
            detail: format!("failure {i}"),
        });
    }
    out
}

#[test]
fn corpus_matches_independent_encoding() {
    let corpus = corpus();
    assert!(corpus.len() >= 50);
    for m in &corpus {
        let want = expected_frame(m);
        let got = encode_message(m).unwrap();
        assert_eq!(got, want, "{m:?}");
        match decode_message(&want).unwrap() {
            Decoded::Message { message, consumed } => {
                assert_eq!(&message, m);
                assert_eq!(consumed, want.len());
            }
            Decoded::NeedMore { .. } => panic!("complete frame reported as partial"),
        }
    }
}

#[test]
fn fixed_frames() {
    assert_eq!(
        encode_message(&Message::ReconnectIns { seconds: 0 }).unwrap(),
        [b'F', b'L', b'W', b'R', 1, 8, 0, 0, 0, 4, 0, 0, 0, 0]
    );
    assert_eq!(
        encode_message(&Message::GetWeightsIns).unwrap(),
        [b'F', b'L', b'W', b'R', 1, 2, 0, 0, 0, 0]
    );
    let w = Weights::new(vec![Tensor::from_f32("a", vec![2], vec![1.0, -2.0]).unwrap()]).unwrap();
    let frame = encode_message(&Message::GetWeightsRes { weights: w }).unwrap();
    let body: &[u8] = &[
        0, 0, 0, 1, // tensor count
        0, 1, b'a', // name
        0, // F32
        1, // rank
        0, 0, 0, 2, // extent
        0x00, 0x00, 0x80, 0x3f, // 1.0 LE
        0x00, 0x00, 0x00, 0xc0, // -2.0 LE
    ];
    assert_eq!(&frame[..10], &[b'F', b'L', b'W', b'R', 1, 3, 0, 0, 0, body.len() as u8]);
    assert_eq!(&frame[10..], body);
}

#[test]
fn config_value_tags() {
    let c = config_of(&[
        ("i", ConfigValue::Int(-1)),
        ("f", ConfigValue::Float(0.5)),
        ("s", ConfigValue::Str("x".into())),
        ("b", ConfigValue::Bool(true)),
    ]);
    let frame = encode_message(&Message::EvaluateIns {
        weights: Weights::empty(),
        config: c,
    })
    .unwrap();
    let body = Bytes::default()
        .u32(0)
        .u16(4)
        .str("i")
        .u8(0)
        .raw(&[0xff; 8])
        .str("f")
        .u8(1)
        .raw(&[0x3f, 0xe0, 0, 0, 0, 0, 0, 0])
        .str("s")
        .u8(2)
        .str("x")
        .str("b")
        .u8(3)
        .u8(1)
        .frame(6);
    assert_eq!(frame, body);
}

#[test]
fn malformed_frames_are_rejected() {
    let good = encode_message(&Message::ReconnectIns { seconds: 3 }).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_message(&bad_magic), Err(ProtocolError::BadMagic(_))));

    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(decode_message(&bad_version), Err(ProtocolError::UnsupportedVersion(2))));

    let mut bad_type = good.clone();
    bad_type[5] = 42;
    assert!(decode_message(&bad_type).is_err());

    let huge = Bytes::default().raw(b"FLWR").u8(1).u8(8).u32((1 << 30) + 1).0;
    assert!(matches!(decode_message(&huge), Err(ProtocolError::FrameTooLarge(_))));

    assert!(matches!(
        decode_message(&good[..good.len() - 1]).unwrap(),
        Decoded::NeedMore { needed: 1 }
    ));

    let zero_examples = Bytes::default().f64(0.1).u64(0).u16(0).frame(7);
    assert!(decode_message(&zero_examples).is_err());

    let bad_reason = Bytes::default().u8(9).frame(9);
    assert!(decode_message(&bad_reason).is_err());

    let trailing = Bytes::default().u32(1).u8(0).frame(8);
    assert!(decode_message(&trailing).is_err());
}
