# Tests package for EchoTrade