import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from srderive.corpus import VrCorpus, make_vr

FIXTURES = Path(__file__).parent / "fixtures"
MINI = FIXTURES / "mini"


class StubServer:
    """Local JSON endpoint. ``handler(path, body) -> (status, obj, headers)``."""

    def __init__(self, handler):
        self.handler = handler
        self.requests = []
        outer = self

        class H(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("content-length", 0))
                body = json.loads(self.rfile.read(n) or b"null")
                outer.requests.append((self.path, body, dict(self.headers)))
                status, obj, headers = outer.handler(self.path, body)
                raw = obj if isinstance(obj, bytes) else json.dumps(obj).encode()
                self.send_response(status)
                for k, v in (headers or {}).items():
                    self.send_header(k, v)
                self.send_header("content-length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.02,), daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def start(handler):
        s = StubServer(handler)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()


def tiny_corpus(descriptions, chapter_title="Session Management", section_title="Basics"):
    """In-memory corpus with ids 3.1.1, 3.1.2, ..."""
    recs = [make_vr(f"3.1.{i}", 3, chapter_title, section_title, d)
            for i, d in enumerate(descriptions, 1)]
    return VrCorpus(tuple(recs))
