//! On-disk layouts read back with a hand-rolled little-endian parser.

use crdi::diffusion::NoiseNet;
use crdi::error::Error;
use crdi::numerics::{RngStream, Tensor};
use crdi::schedules::RigidityMap;
use crdi::sge::{Sge, SgeSet};
use crdi::workbench::formats::{read_samples, read_tensor, write_grid, write_samples, write_tensor};

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Self {
        assert_eq!(&bytes[..4], magic);
        Cursor { bytes, at: 4 }
    }
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        v
    }
    fn f64(&mut self) -> f64 {
        let v = f64::from_le_bytes(self.bytes[self.at..self.at + 8].try_into().unwrap());
        self.at += 8;
        v
    }
    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.at..]
    }
}

#[test]
fn tensor_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.crdt");
    let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 1e-300, f64::MAX, 0.0]).unwrap();
    write_tensor(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut c = Cursor::new(&bytes, b"CRDT");
    assert_eq!(c.u32(), 1);
    assert_eq!(c.u32(), 2);
    assert_eq!((c.u32(), c.u32()), (2, 3));
    let data: Vec<f64> = (0..6).map(|_| c.f64()).collect();
    assert_eq!(data, t.data());
    assert!(c.rest().is_empty());
    assert_eq!(read_tensor(&path).unwrap(), t);

    // every proper prefix is rejected with an offset inside the file
    for cut in 0..bytes.len() {
        match crdi::workbench::formats::decode_tensor(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut, "cut {cut} offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn sample_sets_keep_their_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.crdt");
    let xs: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_vec(vec![i as f64, -(i as f64)]).unwrap())
        .collect();
    write_samples(&path, &xs).unwrap();
    assert_eq!(read_samples(&path).unwrap(), xs);
}

#[test]
fn checkpoint_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.crdn");
    let net = NoiseNet::new(2, &[4], 100, &mut RngStream::new(1, "init")).unwrap();
    net.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut c = Cursor::new(&bytes, b"CRDN");
    let _version = c.u32();
    assert_eq!(c.u32(), 100); // T
    assert_eq!(c.u32(), 0); // plain noise head
    let n = c.u32() as usize;
    let widths: Vec<usize> = (0..n).map(|_| c.u32() as usize).collect();
    assert_eq!(widths.first(), Some(&(2 + 32)));
    assert_eq!(widths.last(), Some(&2));
    let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    assert_eq!(c.rest().len(), 8 * count);
    let params: Vec<f64> = (0..count).map(|_| c.f64()).collect();
    assert_eq!(params, net.backbone().params());
}

#[test]
fn sge_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.crds");
    let map = RigidityMap::new(3, 0, 100, 100).unwrap();
    let mut members = Vec::new();
    for id in 0..2 {
        let mut g = Sge::zeros(map, &[2], Some(id));
        for k in 0..3 {
            let v = Tensor::from_vec(vec![id as f64 + k as f64, 0.5]).unwrap();
            g.set_segment(k, &v).unwrap();
        }
        members.push(g);
    }
    let set = SgeSet::new(members).unwrap();
    set.save(&path, 100).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut c = Cursor::new(&bytes, b"CRDS");
    let _version = c.u32();
    let header: Vec<u32> = (0..5).map(|_| c.u32()).collect();
    assert_eq!(header, [2, 3, 2, 0, 100]); // N, eta, d, window
    let values: Vec<f64> = (0..12).map(|_| c.f64()).collect();
    assert_eq!(&values[..6], &[0.0, 0.5, 1.0, 0.5, 2.0, 0.5]);
    assert_eq!(&values[6..], &[1.0, 0.5, 2.0, 0.5, 3.0, 0.5]);
    let meta: serde_json::Value = serde_json::from_slice(c.rest()).unwrap();
    assert_eq!(meta["members"].as_array().unwrap().len(), 2);
    assert_eq!(SgeSet::load(&path).unwrap(), set);
}

#[test]
fn grid_is_binary_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.pgm");
    let imgs = vec![Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 2.0]).unwrap(); 3];
    write_grid(&path, &imgs, 2).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
    let text = String::from_utf8_lossy(&bytes);
    let mut fields = text.split_ascii_whitespace().skip(1);
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    assert_eq!(fields.next(), Some("255"));
    assert!(bytes.len() >= w * h);
    let pixels = &bytes[bytes.len() - w * h..];
    // values above 1 clamp to white
    assert!(pixels.contains(&255) && pixels.contains(&0));
}

