"""Out-of-process pointmap providers.

Protocol: the pipeline writes one JSON object per line to the provider's stdin,
`{"frame_i": int, "frame_j": int, "image_i": path, "image_j": path}`, and reads
one JSON line back, either `{"prediction": path}` naming a prediction cache
file or `{"error": message}`.

Running this module starts an echo provider that answers from a directory of
precomputed cache files named `<frame_i>_<frame_j>.oapm`:

    python -m optiacoustic.external --cache-dir DIR [--delay SECONDS]
"""

import argparse
import json
import logging
import queue
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .dataset import write_image
from .errors import FormatError, ProviderError, ProviderTimeout
from .pointmap import Frame, PointmapPrediction, PointmapProvider, read_prediction, write_prediction


logger = logging.getLogger(__name__)


def cache_name(frame_i: int, frame_j: int) -> str:
    return f"{frame_i}_{frame_j}.oapm"


class ExternalProvider:
    """Drives a provider subprocess over the line protocol, one request at a time.

    A request that gets no answer within `timeout` seconds kills the process
    (it is restarted on the next call) and raises ProviderTimeout.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0,
                 workdir: Optional[Path] = None, env: Optional[Dict[str, str]] = None):
        self.command = list(command)
        if not self.command:
            raise ProviderError("provider command is empty")
        self.timeout = timeout
        self.env = env
        self._tmp = None if workdir else tempfile.TemporaryDirectory(prefix="oa-provider-")
        self.workdir = Path(workdir) if workdir else Path(self._tmp.name)
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._lock = threading.Lock()

    def _start(self) -> None:
        logger.info("starting provider: %s", " ".join(self.command))
        self._lines = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
                env=self.env,
            )
        except OSError as exc:
            raise ProviderError(f"cannot start provider {' '.join(self.command)!r}: {exc}") from exc
        reader = threading.Thread(target=self._read, args=(self._proc, self._lines), daemon=True)
        reader.start()

    @staticmethod
    def _read(proc: subprocess.Popen, lines: "queue.Queue[Optional[str]]") -> None:
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def _kill(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def close(self) -> None:
        with self._lock:
            if self._proc is not None:
                try:
                    self._proc.stdin.close()
                    self._proc.wait(timeout=self.timeout)
                except (OSError, subprocess.TimeoutExpired):
                    self._kill()
                self._proc = None
            if self._tmp is not None:
                self._tmp.cleanup()
                self._tmp = None

    def __enter__(self) -> "ExternalProvider":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _image_path(self, frame: Frame) -> str:
        """The frame at predictor input size, written once per frame id."""
        path = self.workdir / f"frame_{frame.frame_id:06d}.png"
        if not path.exists():
            write_image(path, frame.image)
        return str(path)

    def predict_pair(self, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
        request = {
            "frame_i": frame_i.frame_id,
            "frame_j": frame_j.frame_id,
            "image_i": self._image_path(frame_i),
            "image_j": self._image_path(frame_j),
        }
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
            except OSError as exc:
                self._kill()
                raise ProviderError(f"provider stdin closed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._kill()
                raise ProviderTimeout(f"no answer within {self.timeout}s for pair {frame_i.frame_id}/{frame_j.frame_id}")
            if line is None:
                self._kill()
                raise ProviderError("provider exited")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProviderError(f"malformed provider response {line.strip()!r}") from exc
        if not isinstance(reply, dict) or "prediction" not in reply:
            raise ProviderError(f"provider error: {reply.get('error') if isinstance(reply, dict) else reply!r}")
        try:
            return read_prediction(reply["prediction"])
        except (OSError, FormatError) as exc:
            raise ProviderError(f"unusable prediction file: {exc}") from exc


class CachedProvider:
    """In-process reader of a prediction cache directory."""

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)

    def predict_pair(self, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
        path = self.cache_dir / cache_name(frame_i.frame_id, frame_j.frame_id)
        try:
            return read_prediction(path)
        except (OSError, FormatError) as exc:
            raise ProviderError(f"no usable cached prediction: {exc}") from exc


class RecordingProvider:
    """Wraps a provider and stores every prediction it serves in a cache directory."""

    def __init__(self, inner: PointmapProvider, cache_dir: Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def predict_pair(self, frame_i: Frame, frame_j: Frame) -> PointmapPrediction:
        pred = self.inner.predict_pair(frame_i, frame_j)
        write_prediction(self.cache_dir / cache_name(frame_i.frame_id, frame_j.frame_id), pred)
        return pred


def echo_command(cache_dir: Path, delay: float = 0.0) -> List[str]:
    """Command line that runs the echo provider with the current interpreter."""
    cmd = [sys.executable, "-m", "optiacoustic.external", "--cache-dir", str(cache_dir)]
    if delay:
        cmd += ["--delay", str(delay)]
    return cmd


def serve(cache_dir: Path, delay: float, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        if delay:
            time.sleep(delay)
        try:
            req = json.loads(line)
            path = Path(cache_dir) / cache_name(int(req["frame_i"]), int(req["frame_j"]))
            reply = {"prediction": str(path)} if path.exists() else {"error": f"no cache file {path.name}"}
        except (ValueError, KeyError, TypeError) as exc:
            reply = {"error": f"bad request: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="Echo pointmap provider answering from cached predictions.")
    parser.add_argument("--cache-dir", type=Path, required=True, help="Directory of <i>_<j>.oapm files.")
    parser.add_argument("--delay", type=float, default=0.0, help="Seconds to wait before each answer.")
    args = parser.parse_args(argv)
    serve(args.cache_dir, args.delay)


if __name__ == "__main__":
    main()
