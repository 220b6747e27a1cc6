"""User side: bisection state machine and query driver."""
