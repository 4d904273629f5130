"""
Subsistema de aquisição de imagem: protocolo de quadros com o robô, buffer
de frame e o respondedor que devolve a posição do objeto.

Quadro: 0xAA | tipo | payload | checksum (XOR de todos os bytes anteriores)

    0x01 pedido de posição   (sem payload)
    0x02 resposta de posição (X, Y em mm, int16 little-endian)
    0x03 nenhum objeto       (sem payload)
    0x0F erro                (1 byte com o código)
"""
import logging
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from functools import reduce
from typing import Callable, List, Optional, Protocol, Tuple

import cv2
import numpy as np

from maod.config import CAMERA_TIMEOUT_S, SERIAL_TIMEOUT_S
from maod.exceptions import FrameError, GeometryError, InvariantViolation, MAODError
from maod.geometry import Calibration, normalized_to_robot
from maod.pipeline import anchor_point

logger = logging.getLogger(__name__)

START_BYTE = 0xAA

POSITION_REQUEST = 0x01
POSITION_RESPONSE = 0x02
NO_OBJECT = 0x03
ERROR = 0x0F

PAYLOAD_LENGTHS = {
    POSITION_REQUEST: 0,
    POSITION_RESPONSE: 4,
    NO_OBJECT: 0,
    ERROR: 1,
}

# Códigos do payload de erro
ERR_CAMERA_TIMEOUT = 0x01
ERR_NO_GROUND = 0x02
ERR_DETECTION_FAILURE = 0x03
ERR_OUT_OF_RANGE = 0x04

_POSITION = struct.Struct('<hh')
_INT16_MIN, _INT16_MAX = -32768, 32767


def checksum(data: bytes) -> int:
    return reduce(lambda a, b: a ^ b, data, 0)


@dataclass(frozen=True)
class AcqFrame:
    type: int
    payload: bytes = b''

    def __post_init__(self):
        if self.type not in PAYLOAD_LENGTHS:
            raise FrameError(f"Tipo de quadro desconhecido: 0x{self.type:02X}", code=FrameError.UNKNOWN_TYPE)
        if len(self.payload) != PAYLOAD_LENGTHS[self.type]:
            raise FrameError(f"Payload de {len(self.payload)} bytes para o tipo 0x{self.type:02X} "
                             f"(esperado {PAYLOAD_LENGTHS[self.type]})", code=FrameError.BAD_LENGTH)

    @classmethod
    def request(cls) -> 'AcqFrame':
        return cls(POSITION_REQUEST)

    @classmethod
    def no_object(cls) -> 'AcqFrame':
        return cls(NO_OBJECT)

    @classmethod
    def error(cls, code: int) -> 'AcqFrame':
        return cls(ERROR, bytes([code]))

    @classmethod
    def position(cls, x_m: float, y_m: float) -> 'AcqFrame':
        """Resposta com (X, Y) em metros; fora do alcance do int16 vira erro 0x04."""
        x_mm, y_mm = int(round(x_m * 1000)), int(round(y_m * 1000))
        if not (_INT16_MIN <= x_mm <= _INT16_MAX and _INT16_MIN <= y_mm <= _INT16_MAX):
            logger.warning(f"⚠️ Posição ({x_m:.3f}, {y_m:.3f}) m fora do alcance do quadro")
            return cls.error(ERR_OUT_OF_RANGE)
        return cls(POSITION_RESPONSE, _POSITION.pack(x_mm, y_mm))

    @property
    def millimeters(self) -> Tuple[int, int]:
        if self.type != POSITION_RESPONSE:
            raise FrameError(f"Quadro 0x{self.type:02X} não carrega posição", code=FrameError.UNKNOWN_TYPE)
        return _POSITION.unpack(self.payload)

    @property
    def meters(self) -> Tuple[float, float]:
        x_mm, y_mm = self.millimeters
        return x_mm / 1000.0, y_mm / 1000.0

    @property
    def error_code(self) -> Optional[int]:
        return self.payload[0] if self.type == ERROR else None


def encode_frame(frame: AcqFrame) -> bytes:
    body = bytes([START_BYTE, frame.type]) + frame.payload
    return body + bytes([checksum(body)])


def frame_length(frame_type: int) -> int:
    return 3 + PAYLOAD_LENGTHS[frame_type]


def decode_frame(data: bytes) -> AcqFrame:
    """
    Valida e decodifica exatamente um quadro.

    Raises:
        FrameError: com código BAD_START, UNKNOWN_TYPE, SHORT_READ, BAD_LENGTH ou CHECKSUM
    """
    data = bytes(data)
    if len(data) < 2:
        raise FrameError(f"Quadro com {len(data)} bytes", code=FrameError.SHORT_READ)
    if data[0] != START_BYTE:
        raise FrameError(f"Byte inicial 0x{data[0]:02X} (esperado 0xAA)", code=FrameError.BAD_START)
    frame_type = data[1]
    if frame_type not in PAYLOAD_LENGTHS:
        raise FrameError(f"Tipo de quadro desconhecido: 0x{frame_type:02X}", code=FrameError.UNKNOWN_TYPE)
    expected = frame_length(frame_type)
    if len(data) < expected:
        raise FrameError(f"Quadro 0x{frame_type:02X} com {len(data)} de {expected} bytes",
                         code=FrameError.SHORT_READ)
    if len(data) > expected:
        raise FrameError(f"Quadro 0x{frame_type:02X} com {len(data)} bytes (esperado {expected})",
                         code=FrameError.BAD_LENGTH)
    if checksum(data[:-1]) != data[-1]:
        raise FrameError(f"Checksum 0x{data[-1]:02X} não confere (calculado 0x{checksum(data[:-1]):02X})",
                         code=FrameError.CHECKSUM)
    return AcqFrame(frame_type, data[2:-1])


class StreamDecoder:
    """Decodificador incremental: ressincroniza no byte inicial após lixo ou erro."""

    def __init__(self):
        self._buffer = bytearray()
        self.errors: List[FrameError] = []

    def feed(self, data: bytes) -> List[AcqFrame]:
        self._buffer.extend(data)
        frames = []
        while self._buffer:
            start = self._buffer.find(START_BYTE)
            if start < 0:
                self._buffer.clear()
                break
            del self._buffer[:start]
            if len(self._buffer) < 2:
                break
            frame_type = self._buffer[1]
            if frame_type not in PAYLOAD_LENGTHS:
                self.errors.append(FrameError(f"Tipo 0x{frame_type:02X}", code=FrameError.UNKNOWN_TYPE))
                del self._buffer[:1]
                continue
            n = frame_length(frame_type)
            if len(self._buffer) < n:
                break
            try:
                frames.append(decode_frame(bytes(self._buffer[:n])))
                del self._buffer[:n]
            except FrameError as e:
                logger.debug(f"Quadro descartado: {e}")
                self.errors.append(e)
                del self._buffer[:1]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buffer)


# ===========================
# TRANSPORTE
# ===========================
class ByteChannel:
    """Fila de bytes em um sentido, com leitura bloqueante e timeout."""

    def __init__(self):
        self._data = bytearray()
        self._cond = threading.Condition()

    def write(self, data: bytes):
        with self._cond:
            self._data.extend(data)
            self._cond.notify_all()

    def read(self, timeout: Optional[float] = None) -> bytes:
        """Todos os bytes disponíveis (espera até haver algum ou o timeout expirar)."""
        with self._cond:
            self._cond.wait_for(lambda: len(self._data) > 0, timeout)
            chunk = bytes(self._data)
            self._data.clear()
            return chunk


class LinkEnd:
    def __init__(self, rx: ByteChannel, tx: ByteChannel, name: str):
        self.rx = rx
        self.tx = tx
        self.name = name
        self.decoder = StreamDecoder()
        self._pending: List[AcqFrame] = []

    def send(self, frame: AcqFrame):
        self.tx.write(encode_frame(frame))

    def send_bytes(self, data: bytes):
        self.tx.write(data)

    def receive(self, timeout: float = SERIAL_TIMEOUT_S) -> AcqFrame:
        deadline = time.monotonic() + timeout
        while not self._pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._pending.extend(self.decoder.feed(self.rx.read(remaining)))
        if not self._pending:
            raise FrameError(f"{self.name}: nenhum quadro em {timeout}s", code=FrameError.SHORT_READ)
        return self._pending.pop(0)


class DuplexLink:
    """Par de canais em memória no lugar da linha serial robô ↔ PC."""

    def __init__(self):
        to_pc, to_robot = ByteChannel(), ByteChannel()
        self.robot = LinkEnd(to_robot, to_pc, 'robô')
        self.pc = LinkEnd(to_pc, to_robot, 'PC')


# ===========================
# CÂMERA E BUFFER
# ===========================
class FrameBuffer:
    """Buffer de um frame entre a câmera e o detector."""

    def __init__(self):
        self._frame: Optional[np.ndarray] = None
        self._cond = threading.Condition()

    def put(self, image: np.ndarray):
        with self._cond:
            self._frame = image
            self._cond.notify_all()

    def wait(self, timeout: float) -> Optional[np.ndarray]:
        with self._cond:
            self._cond.wait_for(lambda: self._frame is not None, timeout)
            return self._frame

    def clear(self):
        with self._cond:
            self._frame = None

    @property
    def empty(self) -> bool:
        return self._frame is None


class CameraSource(Protocol):
    def open(self, buffer: FrameBuffer) -> None: ...

    def close(self) -> None: ...


class CallableCameraSource:
    """Entrega no buffer a imagem produzida por `capture()` ao abrir o stream."""

    def __init__(self, capture: Callable[[], np.ndarray]):
        self.capture = capture
        self.opened = 0
        self.closed = 0

    def open(self, buffer: FrameBuffer):
        self.opened += 1
        buffer.put(self.capture())

    def close(self):
        self.closed += 1


class StaticCameraSource(CallableCameraSource):
    def __init__(self, image: np.ndarray):
        super().__init__(lambda: image)


class SilentCameraSource:
    """Câmera que nunca entrega frame (testa o timeout)."""

    def __init__(self):
        self.opened = 0
        self.closed = 0

    def open(self, buffer: FrameBuffer):
        self.opened += 1

    def close(self):
        self.closed += 1


class OpenCVCameraSource:
    """Webcam real via OpenCV, reduzida para a entrada do extrator (3×S×S em [0, 1])."""

    def __init__(self, device: int = 0, image_size: int = 64):
        self.device = device
        self.image_size = image_size
        self.capture = None

    def open(self, buffer: FrameBuffer):
        self.capture = cv2.VideoCapture(self.device)
        if not self.capture.isOpened():
            logger.error(f"❌ Não foi possível abrir a câmera {self.device}")
            return
        ok, frame = self.capture.read()
        if not ok:
            logger.warning(f"⚠️ Câmera {self.device} não entregou frame")
            return
        frame = cv2.resize(frame, (self.image_size, self.image_size), interpolation=cv2.INTER_AREA)
        rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
        buffer.put(np.ascontiguousarray(rgb.transpose(2, 0, 1)))

    def close(self):
        if self.capture is not None:
            self.capture.release()
            self.capture = None


# ===========================
# RESPONDEDOR
# ===========================
class AcquisitionResponder:
    """
    Atende um pedido de posição por vez:
    abre o stream → espera o frame → detecta → resolve no chão → responde.
    O stream é fechado e o buffer limpo em todos os caminhos.
    """

    def __init__(self, detector, calib: Calibration, timeout: float = CAMERA_TIMEOUT_S):
        self.detector = detector
        self.calib = calib
        self.timeout = timeout
        self.buffer = FrameBuffer()
        self.last_result = None
        self.handled = 0

    def handle_request(self, request: AcqFrame, camera: CameraSource) -> AcqFrame:
        self.handled += 1
        self.last_result = None
        if request.type != POSITION_REQUEST:
            logger.warning(f"⚠️ Quadro inesperado do robô: 0x{request.type:02X}")
            return AcqFrame.error(ERR_DETECTION_FAILURE)
        try:
            camera.open(self.buffer)
            image = self.buffer.wait(self.timeout)
            if image is None:
                logger.warning(f"⚠️ Câmera sem frame em {self.timeout}s")
                return AcqFrame.error(ERR_CAMERA_TIMEOUT)
            result, _ = self.detector.process_frame(image)
            self.last_result = result
            anchor = anchor_point(result)
            if anchor is None:
                return AcqFrame.no_object()
            x, y = normalized_to_robot(anchor, self.calib)
            logger.debug(f"Objeto em ({x:.3f}, {y:.3f}) m no referencial do robô")
            return AcqFrame.position(x, y)
        except GeometryError as e:
            logger.warning(f"⚠️ {e}")
            return AcqFrame.error(ERR_NO_GROUND)
        except MAODError as e:
            logger.error(f"❌ Falha na detecção: {e}")
            return AcqFrame.error(ERR_DETECTION_FAILURE)
        except Exception as e:
            # câmera ou detector quebrados não derrubam o respondedor
            logger.error(f"❌ Erro inesperado no pedido: {e}", exc_info=True)
            return AcqFrame.error(ERR_DETECTION_FAILURE)
        finally:
            try:
                camera.close()
            except Exception as e:
                logger.warning(f"⚠️ Falha ao fechar a câmera: {e}")
            self.buffer.clear()
            if not self.buffer.empty:
                raise InvariantViolation("Buffer de frame não foi limpo após o pedido")

    def serve_link(self, end: LinkEnd, camera: CameraSource, requests: int,
                   timeout: float = SERIAL_TIMEOUT_S) -> int:
        """Atende `requests` pedidos numa ponta do DuplexLink."""
        served = 0
        for _ in range(requests):
            try:
                request = end.receive(timeout)
            except FrameError as e:
                logger.warning(f"⚠️ {e}")
                break
            end.send(self.handle_request(request, camera))
            served += 1
        return served


class _ReusableTCPServer(socketserver.TCPServer):
    allow_reuse_address = True


def make_tcp_server(port: int, responder: AcquisitionResponder, camera: CameraSource,
                    host: str = '127.0.0.1') -> socketserver.TCPServer:
    """Servidor TCP local com o mesmo protocolo de bytes (porta 0 = livre)."""

    class _Handler(socketserver.BaseRequestHandler):
        def handle(self):
            decoder = StreamDecoder()
            logger.info(f"🔌 Conexão de {self.client_address}")
            while True:
                data = self.request.recv(256)
                if not data:
                    break
                for frame in decoder.feed(data):
                    self.request.sendall(encode_frame(responder.handle_request(frame, camera)))

    return _ReusableTCPServer((host, port), _Handler)


def serve_tcp(port: int, responder: AcquisitionResponder, camera: CameraSource,
              host: str = '127.0.0.1'):
    """Atende pedidos no socket até Ctrl+C."""
    with make_tcp_server(port, responder, camera, host) as server:
        logger.info(f"🚀 Respondedor ouvindo em {host}:{server.server_address[1]}")
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            logger.info("⏹️ Respondedor encerrado")
