"""Object detection, tracking and overtake detection on 360-degree panoramic video."""

__version__ = "0.1.0"
