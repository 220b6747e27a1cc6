from twinsieve.cli import app

app()
