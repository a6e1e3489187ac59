//! Blocking TCP transport for multi-process demos.
//!
//! One frame per request and one per reply on a connection the client opens
//! per call. Good enough for a handful of workers on localhost.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::messages::{Frame, GetRowsError, GetRowsRequest, GetRowsResponse, RpcError};
use super::sim::decode_reply;

/// Upper bound on a single frame; larger length prefixes are rejected.
pub const MAX_FRAME_BYTES: usize = 64 << 20;

pub type Handler = Arc<dyn Fn(GetRowsRequest) -> Result<GetRowsResponse, GetRowsError> + Send + Sync>;

fn read_frame(stream: &mut TcpStream) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {n} bytes")));
    }
    let mut buf = Vec::with_capacity(4 + n);
    buf.extend_from_slice(&len);
    buf.resize(4 + n, 0);
    stream.read_exact(&mut buf[4..])?;
    Ok(Some(buf))
}

fn serve_connection(mut stream: TcpStream, handler: &Handler) -> io::Result<()> {
    while let Some(frame) = read_frame(&mut stream)? {
        let reply = match Frame::decode(&frame) {
            Ok(Frame::Request(req)) => match handler(req) {
                Ok(rsp) => Frame::Response(rsp),
                Err(e) => Frame::Error { code: e.code(), message: e.to_string() },
            },
            Ok(_) => Frame::Error { code: 3, message: "expected a request frame".into() },
            Err(e) => Frame::Error { code: 3, message: e.to_string() },
        };
        stream.write_all(&reply.encode())?;
    }
    Ok(())
}

/// A listening mapper endpoint.
pub struct LiveServer {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl LiveServer {
    pub fn bind(addr: &str, handler: Handler) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let handler = handler.clone();
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, &handler) {
                        tracing::debug!("connection closed: {e}");
                    }
                });
            }
        });
        Ok(LiveServer { local_addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

impl Drop for LiveServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it can observe the flag.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn io_to_rpc(e: io::Error) -> RpcError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => RpcError::Timeout,
        _ => RpcError::Unreachable,
    }
}

/// Issues one `GetRows` call over a fresh connection.
pub fn call(addr: SocketAddr, request: &GetRowsRequest, timeout: Duration) -> Result<GetRowsResponse, RpcError> {
    let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(io_to_rpc)?;
    stream.set_read_timeout(Some(timeout)).map_err(io_to_rpc)?;
    stream.set_write_timeout(Some(timeout)).map_err(io_to_rpc)?;
    stream.write_all(&Frame::Request(request.clone()).encode()).map_err(io_to_rpc)?;
    let reply = read_frame(&mut stream).map_err(io_to_rpc)?.ok_or(RpcError::Unreachable)?;
    let _ = stream.shutdown(Shutdown::Both);
    decode_reply(&reply)
}
