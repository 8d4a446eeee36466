import struct

import numpy as np

from ccm_utilities.errors import FormatError


MAGIC = b'TNSR'
VERSION = 1
DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
NATIVE = {0: np.float32, 1: np.float64}
DTYPE_CODES = {np.dtype('float32'): 0, np.dtype('float64'): 1}


class TensorContainer:
    """
    Object to represent a single array in the TNSR container format.

    Layout (little-endian):
        magic 'TNSR' | version u8 | dtype u8 (0=f32, 1=f64) | ndim u8 | pad u8 | dims ndim*u32 | payload

    Several containers may follow each other in one stream; a sample file holds the measurement
    followed by its reference.
    """

    def __init__(self, array):
        array = np.asarray(array)
        if array.dtype not in DTYPE_CODES:
            raise ValueError('Only float32 and float64 arrays can be stored. Got %s instead.' % str(array.dtype))
        if array.ndim < 1 or array.ndim > 255:
            raise ValueError('Can not store an array with %r dimensions.' % array.ndim)
        self.array = array

    def __repr__(self):
        return '<TensorContainer' + str(self.array.shape) + '>'

    def to_bytes(self):
        code = DTYPE_CODES[self.array.dtype]
        header = MAGIC + struct.pack('<BBBB', VERSION, code, self.array.ndim, 0)
        header += struct.pack('<%dI' % self.array.ndim, *self.array.shape)
        payload = np.ascontiguousarray(self.array, dtype=DTYPES[code]).tobytes()
        return header + payload

    def write(self, f):
        f.write(self.to_bytes())

    @staticmethod
    def read(f):
        """
        Read the next container from an open binary stream.
        :return: numpy array, or None at a clean end of stream
        """
        head = f.read(8)
        if not head:
            return None
        if len(head) < 8 or head[:4] != MAGIC:
            raise FormatError('Bad tensor container magic: %r' % head[:4])
        version, code, ndim, _ = struct.unpack('<BBBB', head[4:])
        if version != VERSION:
            raise FormatError('Unsupported tensor container version %r' % version)
        if code not in DTYPES:
            raise FormatError('Unknown tensor container dtype code %r' % code)
        raw_dims = f.read(4 * ndim)
        if len(raw_dims) != 4 * ndim:
            raise FormatError('Truncated tensor container header')
        dims = struct.unpack('<%dI' % ndim, raw_dims)
        n_bytes = int(np.prod(dims)) * DTYPES[code].itemsize
        payload = f.read(n_bytes)
        if len(payload) != n_bytes:
            raise FormatError('Truncated tensor container payload: expected %r bytes, got %r' % (n_bytes, len(payload)))
        arr = np.frombuffer(payload, dtype=DTYPES[code]).reshape(dims)
        return arr.astype(NATIVE[code])


def write_tensors(path, arrays):
    """ Write one or more arrays back to back into a file. """
    with open(path, 'wb') as f:
        for i in arrays:
            TensorContainer(i).write(f)


def read_tensors(path):
    """ Read every container stored in a file, in order. """
    arrays = []
    with open(path, 'rb') as f:
        while True:
            arr = TensorContainer.read(f)
            if arr is None:
                break
            arrays.append(arr)
    return arrays


def write_bundle(path, magic, header, named_arrays):
    """
    Write a bundle file: a 4-byte magic, a version byte, a key=value text header and a sequence
    of (name, container) records in the given order. Used for models, reconstructors and forward
    models.
    :param header: list of (key, value) pairs
    :param named_arrays: list of (name, array) pairs
    """
    text = '\n'.join('%s=%s' % (k, v) for k, v in header).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(magic)
        f.write(struct.pack('<BI', VERSION, len(text)))
        f.write(text)
        f.write(struct.pack('<I', len(named_arrays)))
        for name, arr in named_arrays:
            raw_name = name.encode('utf-8')
            f.write(struct.pack('<H', len(raw_name)))
            f.write(raw_name)
            TensorContainer(arr).write(f)


def read_bundle(path, magic):
    """
    Inverse of write_bundle.
    :return: (header dict, list of (name, array))
    """
    with open(path, 'rb') as f:
        got = f.read(4)
        if got != magic:
            raise FormatError('%s is not a %s file (magic %r)' % (path, magic.decode(), got))
        raw = f.read(5)
        if len(raw) != 5:
            raise FormatError('Truncated header in %s' % path)
        version, n_text = struct.unpack('<BI', raw)
        if version != VERSION:
            raise FormatError('Unsupported %s version %r in %s' % (magic.decode(), version, path))
        text = f.read(n_text).decode('utf-8')
        header = dict()
        for line in text.split('\n'):
            if line:
                k, v = line.split('=', 1)
                header[k] = v
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError('Truncated record table in %s' % path)
        n_records = struct.unpack('<I', raw)[0]
        records = []
        for _ in range(n_records):
            raw = f.read(2)
            if len(raw) != 2:
                raise FormatError('Truncated record in %s' % path)
            name = f.read(struct.unpack('<H', raw)[0]).decode('utf-8')
            arr = TensorContainer.read(f)
            if arr is None:
                raise FormatError('Missing tensor for record %s in %s' % (name, path))
            records.append((name, arr))
    return header, records
