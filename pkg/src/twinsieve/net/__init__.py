"""Wire framing and the server-to-server link."""
