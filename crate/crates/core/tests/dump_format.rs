use proptest::prelude::*;
use tokenmi::corpus::{read_dump, write_dump, DumpHeader, PoolingMode, SentenceRecord};

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite())
}

// (vocab, dim, [(tokens, flat embeddings)])
type Corpus = (u32, usize, Vec<(Vec<u32>, Vec<f32>)>);

fn corpus() -> impl Strategy<Value = Corpus> {
    (2u32..500, 1usize..6).prop_flat_map(|(vocab, dim)| {
        let record = (1usize..10).prop_flat_map(move |n| {
            (prop::collection::vec(0..vocab, n), prop::collection::vec(finite_f32(), n * dim))
        });
        (Just(vocab), Just(dim), prop::collection::vec(record, 0..30))
    })
}

proptest! {
    #[test]
    fn write_then_read_is_bit_exact((vocab, dim, raw) in corpus(), layer in any::<u16>()) {
        let records: Vec<SentenceRecord> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (t, e))| SentenceRecord::new(i as u64, t, e, dim).unwrap())
            .collect();
        let header = DumpHeader::new(vocab, dim as u32, layer);
        let mut bytes = Vec::new();
        let written = write_dump(&records, &header, &mut bytes).unwrap();
        prop_assert_eq!(written as usize, bytes.len());
        let reader = read_dump(bytes.as_slice()).unwrap();
        prop_assert_eq!(reader.header().layer, layer);
        prop_assert_eq!(reader.header().record_count, records.len() as u64);
        let back: Vec<SentenceRecord> = reader.collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(&a.tokens, &b.tokens);
            let bits = |r: &SentenceRecord| r.embeddings.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn pooled_dumps_round_trip((vocab, dim, raw) in corpus()) {
        let records: Vec<SentenceRecord> = raw
            .into_iter()
            .enumerate()
            .map(|(i, (t, e))| SentenceRecord::new(i as u64, t, e[..dim].to_vec(), dim).unwrap())
            .collect();
        let header = DumpHeader::new(vocab, dim as u32, 0).with_pooling(PoolingMode::MeanPooled);
        let mut bytes = Vec::new();
        write_dump(&records, &header, &mut bytes).unwrap();
        let back: Vec<SentenceRecord> = read_dump(bytes.as_slice()).unwrap().collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back, records);
    }
}

#[test]
fn reader_is_lazy() {
    let records: Vec<SentenceRecord> =
        (0..3).map(|i| SentenceRecord::new(i, vec![1, 0], vec![0.5; 4], 2).unwrap()).collect();
    let mut bytes = Vec::new();
    write_dump(&records, &DumpHeader::new(2, 2, 0), &mut bytes).unwrap();
    // corrupt the last record; earlier ones still stream out
    let last = bytes.len() - 4;
    bytes[last..].copy_from_slice(&f32::INFINITY.to_le_bytes());
    let mut reader = read_dump(bytes.as_slice()).unwrap();
    assert!(reader.next().unwrap().is_ok());
    assert!(reader.next().unwrap().is_ok());
    assert!(reader.next().unwrap().is_err());
    assert!(reader.next().is_none());
}
