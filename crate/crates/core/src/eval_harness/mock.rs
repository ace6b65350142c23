//! Scripted loopback HTTP endpoint for exercising the judge client offline.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Clone, Debug, PartialEq)]
pub enum MockReply {
    /// Status line code and JSON body.
    Respond(u16, String),
    /// Closes the connection without answering.
    Hangup,
}

impl MockReply {
    pub fn scores(s: [f64; 4]) -> Self {
        MockReply::Respond(
            200,
            serde_json::json!({"scores": {
                "prompt_alignment": s[0], "aesthetic": s[1], "motion_naturalness": s[2], "video_quality": s[3]
            }})
            .to_string(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordedRequest {
    pub authorization: Option<String>,
    pub body: String,
}

/// Serves scripted replies in order, then repeats the last one.
pub struct MockJudgeServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    _handle: JoinHandle<()>,
}

impl MockJudgeServer {
    pub fn start(script: Vec<MockReply>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let reply = script
                    .get(served)
                    .or(script.last())
                    .cloned()
                    .unwrap_or(MockReply::Hangup);
                served += 1;
                let _ = serve(stream, &reply, &log);
            }
        });
        Ok(Self {
            addr,
            requests,
            _handle: handle,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}/judge", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, reply: &MockReply, log: &Mutex<Vec<RecordedRequest>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap_or(0),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    log.lock().unwrap().push(RecordedRequest {
        authorization: auth,
        body: String::from_utf8_lossy(&body).into_owned(),
    });
    let mut stream = stream;
    match reply {
        MockReply::Hangup => stream.shutdown(std::net::Shutdown::Both),
        MockReply::Respond(code, text) => {
            write!(
                stream,
                "HTTP/1.1 {code} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            )?;
            stream.flush()
        }
    }
}
