use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rama::ofwire::{decode, encode, parse_commit_marker, FrameDecoder};
use rama_bench::{bundle_messages, packet_in};

fn codec(c: &mut Criterion) {
    let msgs = bundle_messages(8);
    let bytes: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();

    let mut group = c.benchmark_group("wire");
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    group.bench_function("encode_bundle", |b| {
        b.iter(|| {
            for m in &msgs {
                black_box(encode(black_box(m)).unwrap());
            }
        })
    });
    group.bench_function("decode_bundle", |b| {
        b.iter(|| {
            let mut off = 0;
            while let Some((m, used)) = decode(black_box(&bytes[off..])).unwrap() {
                black_box(m);
                off += used;
            }
        })
    });
    group.bench_function("stream_decoder", |b| {
        b.iter(|| {
            let mut dec = FrameDecoder::new();
            // feed in small chunks, as a socket would
            for chunk in bytes.chunks(61) {
                dec.extend(chunk);
                while let Some(m) = dec.next_message().unwrap() {
                    black_box(m);
                }
            }
        })
    });
    group.finish();

    let pin = packet_in(9);
    c.bench_function("marker_check", |b| b.iter(|| black_box(parse_commit_marker(black_box(&pin)))));
}

criterion_group!(benches, codec);
criterion_main!(benches);
