"""Minerva: a portable ML microservice framework for legacy host applications.

Hosts train and serve models through versioned REST contracts; model and
algorithm code plugs in as isolated worker processes ("apps") discovered
from manifest files.
"""

__version__ = "0.1.0"
