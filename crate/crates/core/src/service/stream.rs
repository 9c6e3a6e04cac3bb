//! Line-oriented transport over any byte stream (TCP, stdio, pipes).

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use super::wire::{self, Response, MALFORMED_INPUT};
use super::{Endpoint, Service};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Answers request lines until the reader hits end of stream. Returns the
/// number of lines handled.
pub fn serve_stream<R: BufRead, W: Write>(service: &Service, reader: R, mut writer: W) -> Result<u64> {
    let mut handled = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match wire::decode_request(&line) {
            Ok(req) => match service.query(&req.input) {
                Ok(features) => Response::Features { id: req.id, features },
                Err(e) => Response::Error {
                    id: Some(req.id),
                    code: wire::code_for(&e).into(),
                },
            },
            Err(id) => Response::Error {
                id,
                code: MALFORMED_INPUT.into(),
            },
        };
        writer.write_all(wire::encode_response(&response).as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        handled += 1;
    }
    Ok(handled)
}

/// A TCP endpoint serving each connection on its own thread. Dropping it
/// stops accepting new connections.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        if let Some(h) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect(self.addr);
            let _ = h.join();
        }
    }
}

pub fn serve_tcp(service: Service, addr: impl ToSocketAddrs) -> Result<TcpServer> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let svc = service.clone();
            thread::spawn(move || {
                let Ok(read_half) = conn.try_clone() else { return };
                let _ = serve_stream(&svc, BufReader::new(read_half), BufWriter::new(conn));
            });
        }
    });
    Ok(TcpServer {
        addr: local,
        stop,
        accept: Some(accept),
    })
}

pub const PIPELINE_WINDOW: usize = 64;

/// Client side of the line protocol.
pub struct StreamClient<R, W> {
    reader: R,
    writer: W,
    next_id: u64,
}

impl StreamClient<BufReader<TcpStream>, BufWriter<TcpStream>> {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self::new(BufReader::new(stream.try_clone()?), BufWriter::new(stream)))
    }
}

impl<R: BufRead, W: Write> StreamClient<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            next_id: 0,
        }
    }

    fn read_response(&mut self) -> Result<Response> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Protocol("connection closed".into()));
        }
        wire::decode_response(line.trim_end())
    }

    /// Sends requests ahead of their responses, `PIPELINE_WINDOW` at a time so
    /// neither side blocks on a full socket buffer, and returns the results in
    /// request order.
    pub fn pipeline(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Result<Vec<f64>>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for window in inputs.chunks(PIPELINE_WINDOW) {
            out.extend(self.pipeline_window(window)?);
        }
        Ok(out)
    }

    fn pipeline_window(&mut self, inputs: &[Vec<f64>]) -> Result<Vec<Result<Vec<f64>>>> {
        let first = self.next_id;
        for x in inputs {
            let line = wire::encode_request(self.next_id, x);
            self.writer.write_all(line.as_bytes())?;
            self.writer.write_all(b"\n")?;
            self.next_id += 1;
        }
        self.writer.flush()?;
        let mut by_id: HashMap<u64, Response> = HashMap::with_capacity(inputs.len());
        for _ in 0..inputs.len() {
            let r = self.read_response()?;
            let id = r
                .id()
                .ok_or_else(|| Error::Protocol("response without id".into()))?;
            by_id.insert(id, r);
        }
        (first..self.next_id)
            .map(|id| {
                by_id
                    .remove(&id)
                    .map(Response::into_result)
                    .ok_or_else(|| Error::Protocol(format!("no response for request {id}")))
            })
            .collect()
    }
}

impl<R: BufRead, W: Write> Endpoint for StreamClient<R, W> {
    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.pipeline(&[x.to_vec()])?.pop().expect("one response")
    }

    fn query_batch(&mut self, x: &Matrix) -> Vec<Result<Vec<f64>>> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        match self.pipeline(&rows) {
            Ok(results) => results,
            Err(e) => {
                let msg = e.to_string();
                (0..rows.len()).map(|_| Err(Error::Protocol(msg.clone()))).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_encoder, ArchSpec};
    use crate::math::Activation;

    #[test]
    fn stream_matches_in_process() {
        let target = init_encoder(&ArchSpec::new(vec![8], Activation::leaky(), 4, 2), 4).unwrap();
        let a = Service::new(target.clone(), None, 10, 0).unwrap();
        let b = Service::new(target, None, 10, 0).unwrap();
        let inputs: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64 * 0.5, -1.0, 0.25, 2.0]).collect();
        let mut requests = String::new();
        for (i, x) in inputs.iter().enumerate() {
            requests.push_str(&wire::encode_request(i as u64, x));
            requests.push('\n');
        }
        requests.push_str("{\"id\":77,\"input\":[1.0]}\n");
        let mut out = Vec::new();
        serve_stream(&b, requests.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        for (x, line) in inputs.iter().zip(&lines) {
            let got = wire::decode_response(line).unwrap().into_result().unwrap();
            let want = a.query(x).unwrap();
            assert!(got.iter().zip(&want).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(lines[3], "{\"id\":77,\"error\":\"MALFORMED_INPUT\"}");
    }
}
